"""Entity attributes and typed binary relations.

KB files are line-delimited JSON records::

    {"kind": "attr", "entity": 4, "name": "job", "value": "paleontologist"}
    {"kind": "rel", "entity": 4, "name": "brother", "object": 2}

A relation record reads "entity is the <name> of object".
"""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass


class KnowledgeBaseError(ValueError):
    pass


@dataclass(frozen=True)
class KnowledgeBase:
    attributes: tuple[tuple[int, str, str], ...] = ()  # (entity, attribute, value)
    relations: tuple[tuple[int, str, int], ...] = ()  # (subject, relation, object)

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(sorted(self.attributes)))
        object.__setattr__(self, "relations", tuple(sorted(self.relations)))
        seen = set()
        for e, name, _ in self.attributes:
            if (e, name) in seen:
                raise KnowledgeBaseError(f"duplicate attribute {name!r} for entity {e}")
            seen.add((e, name))

    @property
    def entities(self) -> set[int]:
        out = {e for e, _, _ in self.attributes}
        for s, _, o in self.relations:
            out.update((s, o))
        return out

    def value(self, entity, attribute):
        for e, name, v in self.attributes:
            if e == entity and name == attribute:
                return v
        return None

    def attribute_map(self, attribute) -> dict[int, str]:
        return {e: v for e, name, v in self.attributes if name == attribute}

    def attribute_names(self) -> list[str]:
        return sorted({name for _, name, _ in self.attributes})

    def attribute_values(self, attribute) -> list[str]:
        return sorted({v for _, name, v in self.attributes if name == attribute})

    def relation_names(self) -> list[str]:
        return sorted({r for _, r, _ in self.relations})

    def relation_pairs(self) -> dict[str, list[tuple[int, int]]]:
        out = defaultdict(list)
        for s, r, o in self.relations:
            out[r].append((s, o))
        return dict(out)

    def stats(self) -> dict:
        return {
            "entities": len(self.entities),
            "attribute_values": len({(n, v) for _, n, v in self.attributes}),
            "relation_types": len(self.relation_names()),
            "attribute_records": len(self.attributes),
            "relation_records": len(self.relations),
            "values_per_attribute": dict(Counter(n for n, _ in {(n, v) for _, n, v in self.attributes})),
        }

    def validate(self, catalog):
        for e in sorted(self.entities):
            if e not in catalog:
                raise KnowledgeBaseError(f"knowledge base references unknown entity {e}")


def save_kb(kb: KnowledgeBase, path):
    with open(path, "w", encoding="utf-8") as fh:
        for e, name, value in kb.attributes:
            fh.write(json.dumps({"kind": "attr", "entity": e, "name": name, "value": value}) + "\n")
        for s, rel, o in kb.relations:
            fh.write(json.dumps({"kind": "rel", "entity": s, "name": rel, "object": o}) + "\n")


def load_kb(path, catalog=None) -> KnowledgeBase:
    attrs, rels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                kind = rec["kind"]
                if kind == "attr":
                    attrs.append((int(rec["entity"]), str(rec["name"]), str(rec["value"])))
                elif kind == "rel":
                    rels.append((int(rec["entity"]), str(rec["name"]), int(rec["object"])))
                else:
                    raise ValueError(f"unknown kind {kind!r}")
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise KnowledgeBaseError(f"{path}:{lineno}: malformed record ({err})") from None
    kb = KnowledgeBase(tuple(attrs), tuple(rels))
    if catalog is not None:
        kb.validate(catalog)
    return kb
