"""Synthetic germline grammar.

Each sequence is ``BOS + V + junction + J + EOS``. V and J come from small
fixed libraries; the junction is a short run of random residues drawn from a
junction sub-alphabet that no J segment starts with. Labels are recorded
before point mutations are applied, so every token carries its exact region
and every sequence its exact V/J identity.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ALPHABET = "ACDEFGHIKLMNPQRSTVWY"
BOS = "<"
EOS = ">"
TOKENS = ALPHABET + BOS + EOS
BOS_ID = TOKENS.index(BOS)
EOS_ID = TOKENS.index(EOS)
VOCAB = len(TOKENS)

# Drawn once from a fixed master seed; pairwise Hamming distance >= 5, J
# segments start with distinct residues outside JUNCTION_ALPHABET.
V_SEGMENTS = (
    "KNAPANWSDNIFIYYGKFDPQWHDDIFGKHWTGCGWYEQM",
    "LFSYHFYQYMCTQFPWGYDCTAKFEEIVWCENPKFKGFNT",
    "PFQEKDFLVWLYDQNCQDPDNHYVHMTPSCSDAAIYISML",
    "NSAQLEPTKFPNPTEHGDDWFMYYQFLERRNKKMEDRDNS",
    "MIFQPQTDFFQECHARCYLQRRTNCVEQDKSLQRDSHHTD",
    "KGVCPNCEDMETGCYWFGTKWFVFVFLVFPRYQNKDMNMS",
)
J_SEGMENTS = (
    "MDRVHLYNDIELKWE",
    "WGYCKIHPMMCSLDP",
    "IQRANTRWERMSCVA",
    "QQEKGCNMKCLSKCF",
    "EHFITYEKCRTFTQS",
    "VMCMVMLNDADHKRM",
)
JUNCTION_ALPHABET = "GSYRDT"

REGIONS = ("background", "R1", "R2", "R3", "junction")
REGION_CODES = "BabcJ"  # one character per region, used in the sidecar CSV
UNKNOWN = -1


def j_name(j: int) -> str:
    return "unknown" if j == UNKNOWN else f"J{j + 1}"


@dataclass(frozen=True)
class GrammarSpec:
    v_segments: tuple[str, ...] = V_SEGMENTS
    j_segments: tuple[str, ...] = J_SEGMENTS
    junction_alphabet: str = JUNCTION_ALPHABET
    junction_len_range: tuple[int, int] = (3, 8)
    mutation_rate: float = 0.02
    v_class_probs: tuple[float, ...] = (1 / 6,) * 6
    j_class_probs: tuple[float, ...] = (0.05, 0.10, 0.15, 0.45, 0.10, 0.15)
    # half-open windows: (segment, start, stop) in segment coordinates
    region_windows: dict[str, tuple[str, int, int]] = field(
        default_factory=lambda: {"R1": ("V", 5, 13), "R2": ("V", 20, 28), "R3": ("J", 0, 6)}
    )

    def __post_init__(self):
        for group in (self.v_segments, self.j_segments):
            for i, a in enumerate(group):
                for b in group[i + 1 :]:
                    if len(a) == len(b) and hamming(a, b) < 5:
                        raise ValueError(f"segments too close: {a} / {b}")
        for probs in (self.v_class_probs, self.j_class_probs):
            if abs(sum(probs) - 1.0) > 1e-9 or min(probs) < 0:
                raise ValueError(f"class probabilities must sum to 1: {probs}")
        if len(self.v_class_probs) != len(self.v_segments) or len(self.j_class_probs) != len(self.j_segments):
            raise ValueError("class probabilities do not match segment libraries")
        lo, hi = self.junction_len_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad junction range {self.junction_len_range}")
        for name, (seg, a, b) in self.region_windows.items():
            lib = self.v_segments if seg == "V" else self.j_segments
            if not 0 <= a < b <= min(len(s) for s in lib):
                raise ValueError(f"region {name} outside segment bounds")

    @property
    def n_j(self) -> int:
        return len(self.j_segments)

    @property
    def max_len(self) -> int:
        """Longest tokenized sequence including BOS/EOS."""
        return (
            2
            + max(len(s) for s in self.v_segments)
            + self.junction_len_range[1]
            + max(len(s) for s in self.j_segments)
        )


@dataclass
class LabeledSequence:
    residues: str
    v_id: int
    j_id: int
    j_start: int  # index in the tokenized sequence (BOS at 0) where J begins
    regions: str  # one REGION_CODES character per residue

    @property
    def tokens(self) -> list[str]:
        return [BOS, *self.residues, EOS]

    def token_ids(self) -> np.ndarray:
        return encode(self.residues)

    def __len__(self) -> int:
        return len(self.residues) + 2


def hamming(a: str, b: str) -> int:
    return sum(x != y for x, y in zip(a, b))


def encode(residues: str, specials: bool = True) -> np.ndarray:
    ids = [TOKENS.index(c) for c in residues]
    if specials:
        ids = [BOS_ID, *ids, EOS_ID]
    return np.asarray(ids, dtype=np.int64)


def decode(ids) -> str:
    """Token ids to residues; stops at EOS and drops BOS."""
    out = []
    for i in ids:
        i = int(i)
        if i == EOS_ID:
            break
        if i == BOS_ID:
            continue
        out.append(TOKENS[i])
    return "".join(out)


def _region_string(spec: GrammarSpec, v: str, junction_len: int, j: str) -> str:
    codes = ["B"] * len(v) + ["J"] * junction_len + ["B"] * len(j)
    offsets = {"V": 0, "J": len(v) + junction_len}
    for name, (seg, a, b) in spec.region_windows.items():
        code = REGION_CODES[REGIONS.index(name)]
        for p in range(offsets[seg] + a, offsets[seg] + b):
            codes[p] = code
    return "".join(codes)


def sample_sequence(spec: GrammarSpec, rng: np.random.Generator) -> LabeledSequence:
    v_id = int(rng.choice(len(spec.v_segments), p=spec.v_class_probs))
    j_id = int(rng.choice(spec.n_j, p=spec.j_class_probs))
    lo, hi = spec.junction_len_range
    jlen = int(rng.integers(lo, hi + 1))
    junction = "".join(spec.junction_alphabet[i] for i in rng.integers(0, len(spec.junction_alphabet), jlen))
    v = _mutate(spec.v_segments[v_id], spec.mutation_rate, rng)
    j = _mutate(spec.j_segments[j_id], spec.mutation_rate, rng)
    regions = _region_string(spec, spec.v_segments[v_id], jlen, spec.j_segments[j_id])
    return LabeledSequence(v + junction + j, v_id, j_id, 1 + len(v) + jlen, regions)


def _mutate(segment: str, rate: float, rng: np.random.Generator) -> str:
    hits = rng.random(len(segment)) < rate
    shifts = rng.integers(1, len(ALPHABET), len(segment))
    if not hits.any():
        return segment
    out = list(segment)
    for p in np.flatnonzero(hits):
        # substitute a different residue
        out[p] = ALPHABET[(ALPHABET.index(out[p]) + shifts[p]) % len(ALPHABET)]
    return "".join(out)


def sample_corpus(spec: GrammarSpec, n: int, rng: np.random.Generator) -> list[LabeledSequence]:
    if n < 1:
        raise ValueError("corpus size must be at least 1")
    return [sample_sequence(spec, rng) for _ in range(n)]


TAIL_WINDOW = 25


def classify_j(spec: GrammarSpec, tokens) -> tuple[int, float]:
    """Best-matching J segment over every offset in the sequence tail.

    ``tokens`` may be a residue string or a token list with BOS/EOS. Returns
    ``(j_id, confidence)`` with ``confidence = 1 - hamming / len(segment)``;
    ``(UNKNOWN, 0.0)`` when the sequence is too short to hold a J segment.
    """
    residues = "".join(t for t in tokens if t not in (BOS, EOS))
    seg_len = min(len(s) for s in spec.j_segments)
    if len(residues) < seg_len + 2:
        return UNKNOWN, 0.0
    tail = residues[-TAIL_WINDOW:]
    best, best_dist, best_len = UNKNOWN, None, 1
    for cls, seg in enumerate(spec.j_segments):
        for off in range(0, len(tail) - len(seg) + 1):
            d = hamming(tail[off : off + len(seg)], seg)
            if best_dist is None or d * best_len < best_dist * len(seg):
                best, best_dist, best_len = cls, d, len(seg)
    if best_dist is None:
        return UNKNOWN, 0.0
    return best, 1.0 - best_dist / best_len


def classify_many(spec: GrammarSpec, sequences, min_confidence: float = 0.0) -> np.ndarray:
    """classify_j over many residue strings; low-confidence calls become UNKNOWN."""
    out = np.full(len(sequences), UNKNOWN, dtype=np.int64)
    for i, s in enumerate(sequences):
        j, conf = classify_j(spec, s)
        if j != UNKNOWN and conf >= min_confidence:
            out[i] = j
    return out


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

LABEL_COLUMNS = ("seq_id", "v_id", "j_id", "j_start", "regions")


def write_corpus(seqs: list[LabeledSequence], text_path: Path, labels_path: Path, comment: str = "") -> None:
    from saesteer.io import atomic_path

    with atomic_path(text_path) as tmp:
        tmp.write_text("".join(s.residues + "\n" for s in seqs))
    with atomic_path(labels_path) as tmp:
        with open(tmp, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LABEL_COLUMNS)
            for i, s in enumerate(seqs):
                w.writerow([i, s.v_id, s.j_id, s.j_start, s.regions])


def read_corpus(text_path: Path, labels_path: Path) -> list[LabeledSequence]:
    text_path, labels_path = Path(text_path), Path(labels_path)
    for p in (text_path, labels_path):
        if not p.exists():
            raise FileNotFoundError(f"missing corpus file: {p}")
    lines = text_path.read_text().splitlines()
    with open(labels_path, newline="") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    if len(rows) != len(lines):
        raise ValueError(f"{labels_path}: {len(rows)} label rows for {len(lines)} sequences")
    return [
        LabeledSequence(res, int(r["v_id"]), int(r["j_id"]), int(r["j_start"]), r["regions"])
        for res, r in zip(lines, rows)
    ]
