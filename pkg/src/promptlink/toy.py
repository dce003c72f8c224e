"""Synthetic toy knowledge graph generator.

The world is built so that token overlap between entity names is
misleading while the graph structure disambiguates: families come in
pairs ("leonardo_a" / "leonardo_b") whose members share a family name
token yet have fully disjoint correct-tail sets. Two relation classes
are derivable by composition and are the only ones held out for
evaluation, so every valid/test answer is reachable from training facts:

    grandparent_of = parent_of . parent_of
    citizen_of     = lives_in . located_in

Output is deterministic for a given seed, byte for byte.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import kg

FAMILY_ROLES = ("elder", "heir", "scion", "ward")

COMPOSITION_RULES = (
    ("grandparent_of", "parent_of", "parent_of"),
    ("citizen_of", "lives_in", "located_in"),
)

RELATIONS = (
    ("parent_of", "parent of"),
    ("grandparent_of", "grandparent of"),
    ("lives_in", "lives in"),
    ("located_in", "located in"),
    ("citizen_of", "citizen of"),
    ("member_of", "member of"),
    ("generation_of", "generation of"),
)

_GENERATIONS = ("firstborn", "secondborn", "thirdborn", "fourthborn")

_BASE_NAMES = [
    "leonardo", "vincent", "claudia", "pablo", "frida", "marcel", "georgia",
    "salvador", "artemisia", "edgar", "berthe", "gustav", "paula", "henri",
    "camille", "diego", "tamara", "amedeo", "sofonisba", "caspar", "hilma",
    "umberto", "remedios", "egon", "leonora", "piet", "natalia", "kazimir",
    "lyubov", "theo", "jacoba", "emil", "gabriele", "franz", "marianne",
    "august", "paulina", "otto", "hannah", "kurt",
]

_CITY_NAMES = [
    "riverton", "ashford", "maplewood", "stonegate", "brightwater", "fernhill",
    "oakmere", "saltmarsh", "windermoor", "coppervale", "larkspur", "greyhaven",
    "thornbury", "mistfall", "goldcrest", "ebonridge", "silverbrook", "duskmoor",
    "hollowpine", "ravencliff", "summerlea", "frostholm", "gladeport", "wyvernsea",
]

_COUNTRY_NAMES = [
    "valmora", "ostrein", "quendale", "tirvana", "moriveth", "arandor",
    "kelvaria", "drossmark",
]

_CONSONANTS = "bdfglmnprstvz"
_VOWELS = "aeiou"


def _extend_names(base, needed, taken):
    """Deterministic syllabic names (cv·cv·cv) filling past the curated list."""
    names = list(base[:needed])
    taken = set(taken) | set(names)
    if len(names) >= needed:
        return names
    for c1 in _CONSONANTS:
        for v1 in _VOWELS:
            for c2 in _CONSONANTS:
                for v2 in _VOWELS:
                    for c3 in _CONSONANTS:
                        cand = c1 + v1 + c2 + v2 + c3 + "or"
                        if cand in taken:
                            continue
                        taken.add(cand)
                        names.append(cand)
                        if len(names) == needed:
                            return names
    raise ValueError(f"cannot generate {needed} distinct names")


@dataclass
class ToySize:
    """Size knobs; each family line contributes 4 people plus its house, and
    each country carries 4 birth-rank entities, so total entities =
    10*n_base_names + n_cities + 5*n_countries."""
    n_base_names: int = 17
    n_cities: int = 12
    n_countries: int = 6
    holdout_valid: float = 0.15
    holdout_test: float = 0.20

    @property
    def n_entities(self):
        return (10 * self.n_base_names + self.n_cities
                + (1 + len(_GENERATIONS)) * self.n_countries)

    def validate(self):
        if self.n_countries < 2:
            raise ValueError("need >= 2 countries so paired families can differ")
        if self.n_cities < self.n_countries:
            raise ValueError("need at least one city per country")
        if self.holdout_valid + self.holdout_test >= 0.8:
            raise ValueError("holdout fractions leave too little training signal")


def size_for_entities(target):
    """ToySize whose entity count is exactly `target` (target >= 36)."""
    cities = max(2, min(12, target // 20))
    countries = max(2, cities // 2)
    body = target - cities - (1 + len(_GENERATIONS)) * countries
    while body % 10:
        cities += 1
        body -= 1
    return ToySize(n_base_names=body // 10, n_cities=cities, n_countries=countries)


def generate_toy_kg(out_dir, seed=0, size=None):
    """Write a toy dataset (triples, text tables, rules, README) to out_dir."""
    size = size or ToySize()
    size.validate()
    rng = np.random.default_rng(seed)

    bases = _extend_names(_BASE_NAMES, size.n_base_names, [])
    cities = _extend_names(_CITY_NAMES, size.n_cities, bases)
    countries = _extend_names(_COUNTRY_NAMES, size.n_countries, bases + cities)

    city_country = {c: countries[i % size.n_countries] for i, c in enumerate(cities)}

    # Families: every base name occurs twice (variants a/b) with home cities
    # in different countries, so the textual twins never share a correct tail.
    families = []
    for base in bases:
        city_a = cities[rng.integers(size.n_cities)]
        other = [c for c in cities if city_country[c] != city_country[city_a]]
        city_b = other[rng.integers(len(other))]
        families.append((base, "a", city_a))
        families.append((base, "b", city_b))

    def person(base, var, role):
        return f"{base}_{var}_{role}"

    def house(base, var):
        return f"{base}_{var}_house"

    entities = []  # (id, name, description)
    for base, var, city in families:
        line = f"{base} {var}"
        descs = {
            "elder": f"founder of the {line} line, long settled in {city}",
            "heir": f"heir of the {line} line, raised in {city}",
            "scion": f"scion of the {line} line, born in {city}",
            "ward": f"youngest ward of the {line} line, born in {city}",
        }
        for role in FAMILY_ROLES:
            entities.append((person(base, var, role), f"{base} {var} {role}", descs[role]))
        entities.append((house(base, var), f"house of {base} {var}",
                         f"ancestral hall of the {line} line in {city}"))
    for c in cities:
        entities.append((c, c, f"a walled city of the realm of {city_country[c]}"))
    for c in countries:
        entities.append((c, c, "a sovereign realm of the old continent"))
        for i, gen in enumerate(_GENERATIONS):
            entities.append((f"{c}_{gen}", f"{gen} of {c}",
                             f"rank of those born {i + 1} generations into a line of {c}"))

    base_facts = []     # always train
    grandparent = []    # composition class 1
    citizen = []        # composition class 2
    for base, var, city in families:
        country = city_country[city]
        members = [person(base, var, r) for r in FAMILY_ROLES]
        for older, younger in zip(members, members[1:]):
            base_facts.append((older, "parent_of", younger))
        for older, grandchild in zip(members, members[2:]):
            grandparent.append((older, "grandparent_of", grandchild))
        for i, p in enumerate(members):
            base_facts.append((p, "lives_in", city))
            base_facts.append((p, "member_of", house(base, var)))
            base_facts.append((p, "generation_of", f"{country}_{_GENERATIONS[i]}"))
            citizen.append((p, "citizen_of", country))
    for c in cities:
        base_facts.append((c, "located_in", city_country[c]))

    def split(facts):
        facts = list(facts)
        n = len(facts)
        k_valid = int(round(size.holdout_valid * n))
        k_test = int(round(size.holdout_test * n))
        order = rng.permutation(n)
        valid = [facts[i] for i in order[:k_valid]]
        test = [facts[i] for i in order[k_valid:k_valid + k_test]]
        train = [facts[i] for i in sorted(order[k_valid + k_test:])]
        return train, valid, test

    gp_train, gp_valid, gp_test = split(grandparent)
    cz_train, cz_valid, cz_test = split(citizen)

    train = base_facts + gp_train + cz_train
    valid = gp_valid + cz_valid
    test = gp_test + cz_test

    os.makedirs(out_dir, exist_ok=True)

    def write_triples(name, facts):
        with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
            for h, r, t in facts:
                fh.write(f"{h}\t{r}\t{t}\n")

    write_triples(kg.TRAIN_FILE, train)
    write_triples(kg.VALID_FILE, valid)
    write_triples(kg.TEST_FILE, test)

    with open(os.path.join(out_dir, kg.ENTITY_TEXT_FILE), "w", encoding="utf-8") as fh:
        for eid, name, desc in entities:
            fh.write(f"{eid}\t{name}\t{desc}\n")
    with open(os.path.join(out_dir, kg.RELATION_TEXT_FILE), "w", encoding="utf-8") as fh:
        for rid, name in RELATIONS:
            fh.write(f"{rid}\t{name}\n")
    with open(os.path.join(out_dir, "rules.tsv"), "w", encoding="utf-8") as fh:
        for derived, first, second in COMPOSITION_RULES:
            fh.write(f"{derived}\t{first}\t{second}\n")

    with open(os.path.join(out_dir, "README"), "w", encoding="utf-8") as fh:
        fh.write(_readme(seed, size))

    return {
        "n_entities": len(entities),
        "n_relations": len(RELATIONS),
        "train": len(train),
        "valid": len(valid),
        "test": len(test),
    }


def _readme(seed, size):
    return f"""Toy knowledge graph (seed={seed})

Entities ({size.n_entities}): {2 * size.n_base_names} four-person family lines
({size.n_base_names} base names, each reused by an unrelated "a" and "b" line so the
name token is shared while the correct tails are disjoint), one ancestral
house per line, plus {size.n_cities} cities, {size.n_countries} countries and four
birth-rank entities per country.

Generative rules
  parent_of:      elder -> heir -> scion -> ward within each line (train only)
  member_of:      every person -> the line's house (train only)
  generation_of:  every person -> their country's birth rank (train only)
  lives_in:       every person -> the line's home city (train only)
  located_in:     city -> country (train only)
  grandparent_of: two generations down   = parent_of . parent_of
  citizen_of:     person -> country      = lives_in . located_in

Only the two composed relations are held out into valid/test, so every
evaluation answer is derivable from training facts by composing the two
base relations listed in rules.tsv. Paired "a"/"b" lines never share a
house, home city or country.

Files: train.txt / valid.txt / test.txt (head<TAB>relation<TAB>tail),
entity_text.tsv (id<TAB>name<TAB>description),
relation_text.tsv (id<TAB>name), rules.tsv (derived<TAB>base1<TAB>base2).
All files are deterministic functions of the seed and size parameters.
"""
