"""Grade algebra: Crowe/KL pairs and the combined 7-class ordinal label.

Hip OA severity is described by two clinical scales, Crowe (dislocation,
1-4) and Kellgren-Lawrence (joint-space degeneration, 1-4; grades 0 and 1
merged).  Only seven of the sixteen (crowe, kl) pairs occur in practice;
they are arranged on a single ordinal axis: KL ascends while Crowe stays
at 1 (classes 1-4), then Crowe ascends while KL stays at 4 (classes 4-7).
Pairs outside this progression (e.g. Crowe 2, KL 1) carry no combined
class and are scored as wrong by every downstream metric.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

__all__ = [
    "VALID_PAIRS",
    "NUM_CLASSES",
    "GradeLabel",
    "separated_to_combined",
    "combined_to_separated",
    "ManifestRow",
    "load_manifest",
    "write_manifest",
]

# Combined class c (1-based) corresponds to VALID_PAIRS[c - 1].
VALID_PAIRS = (
    (1, 1),
    (1, 2),
    (1, 3),
    (1, 4),
    (2, 4),
    (3, 4),
    (4, 4),
)
NUM_CLASSES = len(VALID_PAIRS)

_PAIR_TO_CLASS = {pair: i + 1 for i, pair in enumerate(VALID_PAIRS)}

SIDES = ("left", "right")


def _check_grade(value, name):
    if not isinstance(value, (int,)) or isinstance(value, bool):
        raise ValueError(f"{name} grade must be an integer, got {value!r}")
    if not 1 <= value <= 4:
        raise ValueError(f"{name} grade must be in 1..4, got {value}")


def separated_to_combined(crowe: int, kl: int) -> int | None:
    """Map a (crowe, kl) pair to its combined class, or None if invalid.

    Returns the combined class 1-7 for the seven observed pairs; None for
    the nine combinations that never occur (these count as false
    predictions downstream).  Raises ValueError for grades outside 1..4.
    """
    _check_grade(crowe, "Crowe")
    _check_grade(kl, "KL")
    return _PAIR_TO_CLASS.get((crowe, kl))


def combined_to_separated(combined: int) -> tuple[int, int]:
    """Inverse of :func:`separated_to_combined` on the valid classes."""
    if not isinstance(combined, int) or isinstance(combined, bool):
        raise ValueError(f"combined class must be an integer, got {combined!r}")
    if not 1 <= combined <= NUM_CLASSES:
        raise ValueError(f"combined class must be in 1..{NUM_CLASSES}, got {combined}")
    return VALID_PAIRS[combined - 1]


@dataclass(frozen=True)
class GradeLabel:
    """A (Crowe, KL) pair plus its combined ordinal class.

    ``combined`` is None when the pair is not one of the seven observed
    combinations; such labels are "invalid" predictions.
    """

    crowe: int
    kl: int
    combined: int | None

    def __post_init__(self):
        _check_grade(self.crowe, "Crowe")
        _check_grade(self.kl, "KL")
        expected = _PAIR_TO_CLASS.get((self.crowe, self.kl))
        if self.combined != expected:
            raise ValueError(
                f"combined class {self.combined} inconsistent with "
                f"(Crowe {self.crowe}, KL {self.kl}); expected {expected}"
            )

    @classmethod
    def from_pair(cls, crowe: int, kl: int) -> "GradeLabel":
        return cls(crowe, kl, separated_to_combined(crowe, kl))

    @classmethod
    def from_combined(cls, combined: int) -> "GradeLabel":
        crowe, kl = combined_to_separated(combined)
        return cls(crowe, kl, combined)

    @property
    def is_valid(self) -> bool:
        return self.combined is not None


@dataclass(frozen=True)
class ManifestRow:
    """One graded image in a dataset manifest."""

    patient_id: str
    side: str
    image_path: str
    crowe: int
    kl: int
    combined_class: int

    def label(self) -> GradeLabel:
        return GradeLabel(self.crowe, self.kl, self.combined_class)


_MANIFEST_FIELDS = ["patient_id", "side", "image_path", "crowe", "kl", "combined_class"]


def load_manifest(path) -> list[ManifestRow]:
    """Read a manifest CSV, validating grade consistency per row.

    The schema is patient_id, side, image_path, crowe, kl, combined_class.
    A row whose (crowe, kl) pair does not map to combined_class is
    rejected: the manifest is ground truth and must be internally
    consistent.
    """
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(_MANIFEST_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"manifest {path} missing columns: {sorted(missing)}")
        for lineno, rec in enumerate(reader, start=2):
            side = rec["side"].strip().lower()
            if side not in SIDES:
                raise ValueError(f"{path}:{lineno}: side must be left/right, got {rec['side']!r}")
            crowe = int(rec["crowe"])
            kl = int(rec["kl"])
            combined = int(rec["combined_class"])
            if separated_to_combined(crowe, kl) != combined:
                raise ValueError(
                    f"{path}:{lineno}: combined_class {combined} inconsistent with "
                    f"(Crowe {crowe}, KL {kl})"
                )
            rows.append(
                ManifestRow(
                    patient_id=rec["patient_id"].strip(),
                    side=side,
                    image_path=rec["image_path"].strip(),
                    crowe=crowe,
                    kl=kl,
                    combined_class=combined,
                )
            )
    return rows


def write_manifest(rows, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_MANIFEST_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {
                    "patient_id": row.patient_id,
                    "side": row.side,
                    "image_path": row.image_path,
                    "crowe": row.crowe,
                    "kl": row.kl,
                    "combined_class": row.combined_class,
                }
            )
