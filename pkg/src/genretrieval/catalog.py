"""Item catalog, interaction records, objective templates and their file formats."""

from __future__ import annotations

import ast
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_MAX_HISTORY = 300

METADATA_FIELDS = ("title", "category", "price", "shop")


class CatalogError(ValueError):
    """Raised for malformed catalog or interaction input."""


class DimensionMismatchError(CatalogError):
    pass


@dataclass(frozen=True)
class CandidateCatalog:
    frequencies: np.ndarray  # (n,) int64
    text_features: np.ndarray  # (n, G) float64
    metadata: tuple[dict, ...] = ()

    def __post_init__(self):
        freqs = np.asarray(self.frequencies, dtype=np.int64)
        text = np.asarray(self.text_features, dtype=np.float64)
        if text.ndim != 2 or text.shape[0] != freqs.shape[0]:
            raise DimensionMismatchError(
                f"text_features shape {text.shape} does not match {freqs.shape[0]} items"
            )
        if freqs.size == 0:
            raise CatalogError("empty catalog")
        if (freqs < 0).any():
            raise CatalogError("negative frequency")
        if not (freqs > 0).any():
            raise CatalogError("at least one item must have a positive frequency")
        meta = tuple(self.metadata) or tuple({} for _ in range(freqs.size))
        if len(meta) != freqs.size:
            raise CatalogError("metadata length does not match item count")
        freqs.setflags(write=False)
        text.setflags(write=False)
        object.__setattr__(self, "frequencies", freqs)
        object.__setattr__(self, "text_features", text)
        object.__setattr__(self, "metadata", meta)

    @property
    def n_items(self) -> int:
        return int(self.frequencies.shape[0])

    @property
    def text_dim(self) -> int:
        return int(self.text_features.shape[1])

    @property
    def seen_flags(self) -> np.ndarray:
        """Items with a non-zero training frequency."""
        return self.frequencies > 0

    def check_id(self, item_id: int) -> int:
        if not 0 <= int(item_id) < self.n_items:
            raise IndexError(f"item id {item_id} out of range [0, {self.n_items})")
        return int(item_id)


def load_catalog(path: str | os.PathLike) -> CandidateCatalog:
    """Read a catalog JSONL file (one item per line, dense ids 0..n-1)."""
    ids, freqs, vecs, meta = [], [], [], []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                item_id = int(rec["id"])
                freq = int(rec.get("freq", 0))
                vec = [float(x) for x in rec["text_vec"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CatalogError(f"{path}:{lineno}: malformed catalog line ({exc})") from exc
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise DimensionMismatchError(
                    f"{path}:{lineno}: text_vec has length {len(vec)}, expected {dim}"
                )
            ids.append(item_id)
            freqs.append(freq)
            vecs.append(vec)
            meta.append({k: str(rec[k]) for k in METADATA_FIELDS if rec.get(k) is not None})
    if not ids:
        raise CatalogError(f"{path}: no items")
    order = np.argsort(ids, kind="stable")
    sorted_ids = np.asarray(ids)[order]
    if not np.array_equal(sorted_ids, np.arange(len(ids))):
        raise CatalogError(f"{path}: non-dense ids (expected 0..{len(ids) - 1})")
    return CandidateCatalog(
        frequencies=np.asarray(freqs, dtype=np.int64)[order],
        text_features=np.asarray(vecs, dtype=np.float64)[order],
        metadata=tuple(meta[i] for i in order),
    )


def _catalog_line(catalog: CandidateCatalog, i: int) -> str:
    rec = {
        "id": i,
        "freq": int(catalog.frequencies[i]),
        "text_vec": [float(x) for x in catalog.text_features[i]],
    }
    for key in METADATA_FIELDS:
        if key in catalog.metadata[i]:
            rec[key] = catalog.metadata[i][key]
    return json.dumps(rec, separators=(", ", ": "))


def save_catalog(catalog: CandidateCatalog, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i in range(catalog.n_items):
            fh.write(_catalog_line(catalog, i) + "\n")


def remap_ids(ids: Iterable[int]) -> dict[int, int]:
    """Map arbitrary (sparse) item ids onto dense 0..n-1, preserving order."""
    return {old: new for new, old in enumerate(sorted(set(int(i) for i in ids)))}


# -- interactions -------------------------------------------------------------


@dataclass
class InteractionRecord:
    user_id: str
    objective_tag: str
    history: list[int] = field(default_factory=list)  # most recent last
    positives: list[int] = field(default_factory=list)
    query_text: str | None = None
    # optional serialization extras
    attributes: dict = field(default_factory=dict)
    purchased: list[int] = field(default_factory=list)
    favorited: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        rec = {
            "user": self.user_id,
            "objective": self.objective_tag,
            "history": [int(i) for i in self.history],
            "positives": [int(i) for i in self.positives],
        }
        if self.query_text is not None:
            rec["query"] = self.query_text
        return json.dumps(rec, separators=(", ", ": "))


def load_interactions(
    path: str | os.PathLike,
    n_items: int | None = None,
    max_history: int = DEFAULT_MAX_HISTORY,
    require_positives: bool = True,
) -> list[InteractionRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                record = InteractionRecord(
                    user_id=str(rec["user"]),
                    objective_tag=str(rec["objective"]),
                    history=[int(i) for i in rec.get("history", [])][-max_history:]
                    if max_history > 0
                    else [],
                    positives=[int(i) for i in rec.get("positives", [])],
                    query_text=rec.get("query"),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CatalogError(f"{path}:{lineno}: malformed interaction line ({exc})") from exc
            if require_positives and not record.positives:
                raise CatalogError(f"{path}:{lineno}: record has no positives")
            if n_items is not None:
                for i in record.history + record.positives:
                    if not 0 <= i < n_items:
                        raise CatalogError(f"{path}:{lineno}: item id {i} out of range")
            records.append(record)
    return records


def save_interactions(records: Sequence[InteractionRecord], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


# -- objectives ---------------------------------------------------------------


@dataclass(frozen=True)
class ObjectiveSpec:
    tag: str
    template: str

    def render(self, query: str | None = None) -> str:
        text = self.template
        if "{QUERY}" in text:
            text = text.replace("{QUERY}", query or "")
        return text


DEFAULT_OBJECTIVES = {
    "CPR": "Please retrieve items that the user will click on.",
    "PPR": "Please retrieve items that the user will purchase.",
    "RSA": "Please retrieve items for scenario A.",
    "RSB": "Please retrieve items for scenario B.",
    "RQ": "Please retrieve items that match the given query: {QUERY}.",
}


def default_registry() -> dict[str, ObjectiveSpec]:
    return {tag: ObjectiveSpec(tag, text) for tag, text in DEFAULT_OBJECTIVES.items()}


def load_objective_registry(path: str | os.PathLike) -> dict[str, ObjectiveSpec]:
    """Parse a flat ``tag = "template text"`` file. ``#`` starts a comment line."""
    registry: dict[str, ObjectiveSpec] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith(("#", ";", "[")):
                continue
            tag, sep, value = line.partition("=")
            tag, value = tag.strip(), value.strip()
            if not sep or not tag:
                raise CatalogError(f"{path}:{lineno}: expected 'tag = \"template\"'")
            if value[:1] in "\"'":
                try:
                    value = ast.literal_eval(value)
                except (SyntaxError, ValueError) as exc:
                    raise CatalogError(f"{path}:{lineno}: bad string literal") from exc
            if tag in registry:
                raise CatalogError(f"{path}:{lineno}: duplicate objective tag {tag!r}")
            registry[tag] = ObjectiveSpec(tag, str(value))
    return registry


def save_objective_registry(registry: dict[str, ObjectiveSpec], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tag, spec in registry.items():
            fh.write(f"{tag} = {json.dumps(spec.template)}\n")


# -- serialization templates --------------------------------------------------


@dataclass(frozen=True)
class QueryToken:
    """Placeholder for the j-th learnable query token appended to the input."""

    index: int


def _words(text: str) -> list[str]:
    return text.split()


def serialize_user(
    record: InteractionRecord,
    objective: ObjectiveSpec,
    n_queries: int,
    max_history: int = DEFAULT_MAX_HISTORY,
) -> list:
    """Render a record as text tokens (str) interleaved with item ids (int).

    Empty features drop their whole text fragment. Behaviour sequences keep
    the ``max_history`` most recent ids and are never padded. The objective
    text follows the user text and ``n_queries`` :class:`QueryToken` close
    the sequence.
    """
    tokens: list = []
    attrs = record.attributes or {}
    parts = []
    if attrs.get("age"):
        parts.append(["age", str(attrs["age"])])
    if attrs.get("gender"):
        parts.append(["gender", str(attrs["gender"])])
    place = [str(attrs[k]) for k in ("province", "city") if attrs.get(k)]
    if place:
        parts.append(["located", "in", ", ".join(place)])
    if parts:
        tokens += _words("The user attributes are as follows:")
        for k, part in enumerate(parts):
            sep = "," if k < len(parts) - 1 else "."
            tokens += part[:-1] + [part[-1] + sep]

    behaviours = [
        ("favorited", record.favorited),
        ("purchased", record.purchased),
        ("clicked", record.history),
    ]
    behaviours = [(verb, list(ids)[-max_history:]) for verb, ids in behaviours if ids]
    if max_history <= 0:
        behaviours = []
    if behaviours:
        tokens += ["The", "user", "has"]
        for k, (verb, ids) in enumerate(behaviours):
            tokens.append(verb)
            tokens += [int(i) for i in ids]
            tokens.append("," if k < len(behaviours) - 1 else ".")

    tokens += _words(objective.render(record.query_text))
    tokens += [QueryToken(j) for j in range(n_queries)]
    return tokens


ITEM_TEMPLATE = (
    ("title", "The item title is {}."),
    ("category", "The category is {}."),
    ("price", "The price is {}."),
    ("shop", "The shop name is {}."),
)


def serialize_item(catalog: CandidateCatalog, item_id: int) -> str:
    meta = catalog.metadata[catalog.check_id(item_id)]
    return " ".join(fmt.format(meta[key]) for key, fmt in ITEM_TEMPLATE if meta.get(key))
