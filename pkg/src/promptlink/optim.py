"""Parameter bookkeeping, AdamW, finite-difference gradient checks, checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, kink_monitor


class ParameterGroup:
    """Named parameter tensors with a trainable/frozen partition.

    Frozen tensors receive no optimizer updates and never allocate moment
    state; flipping a tensor to frozen drops any state it had.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}
        self._state: dict[str, dict] = {}
        self.step_count = 0

    def register(self, name, t, trainable=True):
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        t.name = name
        t.requires_grad = trainable
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name):
        return self._params[name]

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def is_trainable(self, name):
        return self._trainable[name]

    def trainable_names(self):
        return [n for n, f in self._trainable.items() if f]

    def frozen_names(self):
        return [n for n, f in self._trainable.items() if not f]

    def set_trainable(self, name, flag):
        if name not in self._params:
            raise KeyError(name)
        self._trainable[name] = bool(flag)
        self._params[name].requires_grad = bool(flag)
        if not flag:
            self._state.pop(name, None)

    def optimizer_state(self, name):
        return self._state.get(name)

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def arrays(self):
        """Snapshot of all parameter values (copies), keyed by name."""
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_arrays(self, arrays, strict=True):
        for n, t in self._params.items():
            if n not in arrays:
                if strict:
                    raise KeyError(f"checkpoint missing parameter {n!r}")
                continue
            a = arrays[n]
            if tuple(a.shape) != tuple(t.data.shape):
                raise ValueError(f"parameter {n!r}: checkpoint shape {a.shape} != model {t.data.shape}")
            t.data = a.astype(t.data.dtype, copy=True)

    def n_trainable_values(self):
        return sum(self._params[n].size for n in self.trainable_names())


def adamw_step(group, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
    """One decoupled-weight-decay Adam step over the group's trainable tensors.

    Tensors with non-finite gradients are skipped for this step; the number
    of skips is returned so callers can surface a warning count.
    """
    group.step_count += 1
    skipped = 0
    for name in group.trainable_names():
        p = group[name]
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            skipped += 1
            continue
        st = group._state.get(name)
        if st is None:
            st = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            group._state[name] = st
        st["t"] += 1
        t = st["t"]
        st["m"] = beta1 * st["m"] + (1.0 - beta1) * g
        st["v"] = beta2 * st["v"] + (1.0 - beta2) * (g * g)
        mhat = st["m"] / (1.0 - beta1 ** t)
        vhat = st["v"] / (1.0 - beta2 ** t)
        p.data = p.data - lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p.data)
    return skipped


# -- gradient checking --------------------------------------------------------

KINK_GAP = 1e-4


@dataclass
class GradCheckEntry:
    name: str
    status: str          # "ok", "failed", "skipped"
    max_rel_error: float = 0.0
    detail: str = ""


@dataclass
class GradCheckReport:
    passed: bool
    entries: list = field(default_factory=list)
    resamples: int = 0

    def entry(self, name):
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def summary(self):
        lines = [f"grad_check: {'PASS' if self.passed else 'FAIL'} (resamples={self.resamples})"]
        for e in self.entries:
            lines.append(f"  {e.name}: {e.status} max_rel_err={e.max_rel_error:.3e} {e.detail}".rstrip())
        return "\n".join(lines)


def _rel_error(a, n, floor=1e-4):
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(f, params, tol=1e-5, h=1e-5, rng=None, max_resamples=5):
    """Compare reverse-mode gradients of scalar `f()` against central differences.

    `params` maps names to tensors; frozen tensors are reported as skipped
    and asserted to carry no analytic gradient. Evaluation points near a
    ReLU/|x| kink are jittered and retried. Non-finite values produce a
    failure report rather than an exception.
    """
    if isinstance(params, ParameterGroup):
        named = {n: params[n] for n in params.names()}
        trainable = {n: params.is_trainable(n) for n in named}
    else:
        named = dict(params)
        trainable = {n: t.requires_grad for n, t in named.items()}
    if rng is None:
        rng = np.random.default_rng(0)

    resamples = 0
    while True:
        with kink_monitor() as mon:
            out = f()
        if mon.min_gap >= KINK_GAP:
            break
        if resamples >= max_resamples:
            return GradCheckReport(False, [GradCheckEntry(
                "<all>", "failed", np.inf,
                f"could not move off a kink after {max_resamples} resamples")], resamples)
        resamples += 1
        for n, t in named.items():
            if trainable[n]:
                t.data = t.data + rng.uniform(-0.05, 0.05, size=t.data.shape).astype(t.data.dtype)

    if out.size != 1:
        raise ValueError("grad_check expects a scalar-valued computation")
    if not np.isfinite(out.data).all():
        return GradCheckReport(False, [GradCheckEntry("<output>", "failed", np.inf, "non-finite output")],
                               resamples)

    for t in named.values():
        t.grad = None
    out.backward()
    analytic = {n: (None if t.grad is None else t.grad.copy()) for n, t in named.items()}

    entries = []
    passed = True
    for name, t in named.items():
        if not trainable[name]:
            detail = "" if analytic[name] is None else "frozen tensor received an analytic gradient"
            entries.append(GradCheckEntry(name, "skipped" if not detail else "failed", 0.0, detail))
            passed = passed and not detail
            continue
        a = analytic[name]
        if a is None:
            a = np.zeros_like(t.data)
        if not np.all(np.isfinite(a)):
            entries.append(GradCheckEntry(name, "failed", np.inf, "non-finite analytic gradient"))
            passed = False
            continue
        max_err = 0.0
        flat = t.data.reshape(-1)
        aflat = a.reshape(-1)
        ok = True
        for i in range(flat.size):
            orig = flat[i]
            step = h * max(1.0, abs(float(orig)))
            flat[i] = orig + step
            hi = float(flat[i])
            fp = float(f().data)
            flat[i] = orig - step
            lo = float(flat[i])
            fm = float(f().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                entries.append(GradCheckEntry(name, "failed", np.inf, f"non-finite value at element {i}"))
                passed = ok = False
                break
            numeric = (fp - fm) / (hi - lo)
            err = _rel_error(float(aflat[i]), numeric)
            if err > max_err:
                max_err = err
        if not ok:
            continue
        status = "ok" if max_err <= tol else "failed"
        if status == "failed":
            passed = False
        entries.append(GradCheckEntry(name, status, max_err))
    return GradCheckReport(passed, entries, resamples)


# -- checkpoint container -----------------------------------------------------

CHECKPOINT_MAGIC = b"PLCKPT1\n"


def save_checkpoint(path, arrays, config):
    """Write named arrays plus a config echo; byte-for-byte reproducible.

    Arrays are serialized in sorted name order as raw little-endian buffers
    behind a JSON header carrying dtype/shape/offset metadata.
    """
    names = sorted(arrays)
    blobs = []
    meta = []
    offset = 0
    for n in names:
        a = np.ascontiguousarray(arrays[n])
        if a.dtype.byteorder == ">":
            a = a.astype(a.dtype.newbyteorder("<"))
        raw = a.tobytes()
        meta.append({"name": n, "dtype": a.dtype.str, "shape": list(a.shape),
                     "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config, "arrays": meta},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns (arrays, config)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        hlen = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        body = fh.read()
    arrays = {}
    for m in header["arrays"]:
        raw = body[m["offset"]:m["offset"] + m["nbytes"]]
        arrays[m["name"]] = np.frombuffer(raw, dtype=np.dtype(m["dtype"])).reshape(m["shape"]).copy()
    return arrays, header["config"]
