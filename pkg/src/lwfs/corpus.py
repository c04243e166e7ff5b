"""Synthetic bilingual corpora with controllable code-switching.

Each symbol owns a fixed random prototype vector; an utterance concatenates
its tokens' prototypes (duration-jittered, noise-added). Language A and B
have private symbol pools plus an optional shared pool drawn by both — the
shared symbols are what makes the two languages acoustically confusable.

Token lang_tags record the language context the token was uttered in ("A" or
"B"); the "shared" tag is admitted by the data model for hand-built corpora
but the generator always tags by context, so a monolingual-A corpus is
tagged all-A and has CMI exactly 0.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import net

MODES = ("monolingual-A", "monolingual-B", "code-switched")
_MODE_SALT = {"monolingual-A": 1, "monolingual-B": 2, "code-switched": 3}
_MODE_PREFIX = {"monolingual-A": "monoA", "monolingual-B": "monoB", "code-switched": "cs"}

LANG_TAGS = ("A", "B", "shared")


class ManifestError(ValueError):
    """Malformed manifest file; message carries the offending line number."""


@dataclass
class Utterance:
    id: str
    feats: np.ndarray
    transcript: list[str]
    lang_tags: list[str]
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.feats = np.asarray(self.feats, dtype=np.float64)
        if self.feats.ndim != 2 or self.feats.shape[0] < 1:
            raise ValueError(f"utterance {self.id!r}: feats must be (T, F) with T >= 1")
        if not np.all(np.isfinite(self.feats)):
            raise ValueError(f"utterance {self.id!r}: non-finite features")
        if len(self.transcript) != len(self.lang_tags):
            raise ValueError(f"utterance {self.id!r}: transcript/lang_tags length mismatch")
        bad = [t for t in self.lang_tags if t not in LANG_TAGS]
        if bad:
            raise ValueError(f"utterance {self.id!r}: invalid lang_tags {bad}")


@dataclass(frozen=True)
class GenSpec:
    vocab_a: int = 10
    vocab_b: int = 10
    shared: int = 4
    switch_prob: float = 0.3
    utt_len: tuple[int, int] = (3, 8)
    frames_per_symbol: tuple[int, int] = (2, 4)
    noise_sigma: float = 0.3
    feature_dim: int = 8
    seed: int = 0
    # distance between paired a_i/b_i prototypes; None draws them independently.
    # Small values make the languages acoustically confusable.
    confusable_dist: float | None = None
    # fraction of the A vocabulary that code-switched utterances draw from;
    # below 1.0 the CS corpus rehearses only part of the old task's lexicon.
    cs_a_coverage: float = 1.0

    def __post_init__(self):
        if self.vocab_a < 1 or self.vocab_b < 1 or self.shared < 0:
            raise ValueError("vocab_a/vocab_b must be >= 1, shared >= 0")
        if not 0.0 <= self.switch_prob <= 1.0:
            raise ValueError(f"switch_prob must be in [0, 1], got {self.switch_prob}")
        if self.noise_sigma < 0.0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.confusable_dist is not None and self.confusable_dist <= 0:
            raise ValueError("confusable_dist must be positive (or None)")
        if not 0.0 < self.cs_a_coverage <= 1.0:
            raise ValueError(f"cs_a_coverage must be in (0, 1], got {self.cs_a_coverage}")
        for name in ("utt_len", "frames_per_symbol"):
            lo, hi = getattr(self, name)
            if not (1 <= lo <= hi):
                raise ValueError(f"{name} must satisfy 1 <= lo <= hi, got ({lo}, {hi})")

    def symbols(self) -> tuple[list[str], list[str], list[str]]:
        return ([f"a{i}" for i in range(self.vocab_a)],
                [f"b{i}" for i in range(self.vocab_b)],
                [f"s{i}" for i in range(self.shared)])

    def prototypes(self) -> dict[str, np.ndarray]:
        """Fixed per-symbol feature vectors, a pure function of the spec seed."""
        rng = np.random.default_rng([self.seed, 101])
        a, b, s = self.symbols()
        protos = {sym: rng.normal(0.0, 1.0, self.feature_dim) for sym in a}
        for i, sym in enumerate(b):
            if self.confusable_dist is not None and i < len(a):
                direction = rng.normal(0.0, 1.0, self.feature_dim)
                direction /= np.linalg.norm(direction)
                protos[sym] = protos[a[i]] + self.confusable_dist * direction
            else:
                protos[sym] = rng.normal(0.0, 1.0, self.feature_dim)
        for sym in s:
            protos[sym] = rng.normal(0.0, 1.0, self.feature_dim)
        return protos

    def spec_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Manifest:
    utterances: list[Utterance]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [u.id for u in self.utterances]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate utterance ids: {dupes[:5]}")

    def __len__(self) -> int:
        return len(self.utterances)

    def ids(self) -> list[str]:
        return [u.id for u in self.utterances]


def generate(spec: GenSpec, n_utts: int, mode: str, salt: int = 0) -> Manifest:
    """Draw a corpus. ``salt`` separates streams (train vs test) of one spec."""
    if n_utts < 1:
        raise ValueError(f"n_utts must be >= 1, got {n_utts}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    a_syms, b_syms, s_syms = spec.symbols()
    protos = spec.prototypes()
    a_pool = a_syms
    if mode == "code-switched" and spec.cs_a_coverage < 1.0:
        a_pool = a_syms[:max(1, int(round(spec.vocab_a * spec.cs_a_coverage)))]
    pools = {"A": a_pool + s_syms, "B": b_syms + s_syms}
    rng = np.random.default_rng([spec.seed, _MODE_SALT[mode], salt, 23])
    lo, hi = spec.utt_len
    flo, fhi = spec.frames_per_symbol
    utts = []
    prefix = _MODE_PREFIX[mode]
    for i in range(n_utts):
        length = int(rng.integers(lo, hi + 1))
        lang = "B" if mode == "monolingual-B" else "A"
        transcript, tags, rows = [], [], []
        for j in range(length):
            if mode == "code-switched" and j > 0 and rng.random() < spec.switch_prob:
                lang = "B" if lang == "A" else "A"
            pool = pools[lang]
            sym = pool[int(rng.integers(len(pool)))]
            transcript.append(sym)
            tags.append(lang)
            dur = int(rng.integers(flo, fhi + 1))
            rows.append(protos[sym] + rng.normal(0.0, spec.noise_sigma,
                                                 (dur, spec.feature_dim)))
        utts.append(Utterance(id=f"{prefix}-{salt}-{i:05d}",
                              feats=np.concatenate(rows, axis=0),
                              transcript=transcript, lang_tags=tags))
    # json round-trip so meta compares equal after manifest save/load
    meta = {"mode": mode, "salt": salt, "feature_dim": spec.feature_dim,
            "gen_spec": json.loads(json.dumps(asdict(spec))),
            "gen_spec_hash": spec.spec_hash()}
    return Manifest(utterances=utts, meta=meta)


def pool(*manifests: Manifest) -> Manifest:
    if not manifests:
        raise ValueError("pool needs at least one manifest")
    dims = {m.meta.get("feature_dim", m.utterances[0].feats.shape[1]) for m in manifests if m.utterances}
    if len(dims) > 1:
        raise ValueError(f"incompatible feature dims: {sorted(dims)}")
    utts = [u for m in manifests for u in m.utterances]
    meta = {"mode": "pooled", "feature_dim": dims.pop() if dims else None,
            "pooled_from": [m.meta.get("mode", "?") for m in manifests]}
    return Manifest(utterances=utts, meta=meta)  # duplicate ids rejected there


def split(manifest: Manifest, fractions, seed: int) -> list[Manifest]:
    fractions = list(fractions)
    if not fractions or any(f <= 0 for f in fractions):
        raise ValueError("fractions must all be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(manifest)
    order = np.random.default_rng([int(seed), 7]).permutation(n)
    cuts = [0] + [int(round(float(c) * n)) for c in np.cumsum(fractions)]
    cuts[-1] = n
    out = []
    for i in range(len(fractions)):
        take = order[cuts[i]:cuts[i + 1]]
        if len(take) == 0:
            raise ValueError(f"split {i} (fraction {fractions[i]}) would be empty for n={n}")
        meta = dict(manifest.meta)
        meta["split"] = {"index": i, "fractions": fractions, "seed": int(seed)}
        out.append(Manifest(utterances=[manifest.utterances[j] for j in take], meta=meta))
    return out


def build_vocab(spec: GenSpec, scope: str = "union") -> net.Vocab:
    """Vocab over the generator's symbols; tags record symbol ownership."""
    a_syms, b_syms, s_syms = spec.symbols()
    if scope == "union":
        tagged = [(s, "A") for s in a_syms] + [(s, "B") for s in b_syms]
    elif scope == "A":
        tagged = [(s, "A") for s in a_syms]
    elif scope == "B":
        tagged = [(s, "B") for s in b_syms]
    else:
        raise ValueError(f"scope must be 'union', 'A', or 'B', got {scope!r}")
    tagged += [(s, "shared") for s in s_syms]
    return net.Vocab.build(tagged)


# -- manifest I/O ----------------------------------------------------------

_KNOWN_FIELDS = {"id", "transcript", "lang_tags", "feats", "feats_path"}


def save_features(path, feats: np.ndarray) -> None:
    feats = np.ascontiguousarray(feats, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", feats.shape[0], feats.shape[1]))
        fh.write(feats.tobytes())


def load_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8:
            raise ManifestError(f"{path}: truncated feature header")
        t, f = struct.unpack("<II", head)
        body = fh.read()
    if len(body) != t * f * 8:
        raise ManifestError(f"{path}: feature payload is {len(body)} bytes, header says {t * f * 8}")
    return np.frombuffer(body, dtype="<f8").reshape(t, f).copy()


def save_manifest(manifest: Manifest, path, external_features: bool = False) -> None:
    """Write line-delimited JSON: one header record, then one per utterance.

    With ``external_features`` the matrices go to raw sidecar files in
    ``<stem>_feats/`` next to the manifest, referenced by relative path.
    """
    path = Path(path)
    feats_dir = None
    if external_features:
        feats_dir = path.parent / f"{path.stem}_feats"
        feats_dir.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        header = {"kind": "header", "version": 1, "meta": manifest.meta}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for u in manifest.utterances:
            rec = dict(u.extra)
            rec.update({"id": u.id, "transcript": u.transcript, "lang_tags": u.lang_tags})
            if external_features:
                fname = f"{u.id}.f64"
                save_features(feats_dir / fname, u.feats)
                rec["feats_path"] = f"{feats_dir.name}/{fname}"
            else:
                rec["feats"] = u.feats.tolist()
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_manifest(path) -> Manifest:
    path = Path(path)
    utts = []
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}: line {lineno}: invalid JSON ({e})") from None
            if lineno == 1:
                if not isinstance(rec, dict) or rec.get("kind") != "header":
                    raise ManifestError(f"{path}: line 1: missing header record")
                meta = rec.get("meta", {})
                continue
            for fld in ("id", "transcript", "lang_tags"):
                if fld not in rec:
                    raise ManifestError(f"{path}: line {lineno}: missing field {fld!r}")
            if ("feats" in rec) == ("feats_path" in rec):
                raise ManifestError(
                    f"{path}: line {lineno}: need exactly one of 'feats' or 'feats_path'")
            if "feats" in rec:
                feats = np.asarray(rec["feats"], dtype=np.float64)
            else:
                feats = load_features(path.parent / rec["feats_path"])
            extra = {k: v for k, v in rec.items() if k not in _KNOWN_FIELDS}
            try:
                utts.append(Utterance(id=rec["id"], feats=feats,
                                      transcript=list(rec["transcript"]),
                                      lang_tags=list(rec["lang_tags"]), extra=extra))
            except ValueError as e:
                raise ManifestError(f"{path}: line {lineno}: {e}") from None
    return Manifest(utterances=utts, meta=meta)
