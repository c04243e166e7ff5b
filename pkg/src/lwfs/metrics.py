"""WER, code-mixing index, and model evaluation over test manifests."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import ctc, net


@dataclass(frozen=True)
class WerBreakdown:
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int
    wer: float


def wer(ref, hyp) -> WerBreakdown:
    """Levenshtein alignment at unit costs; ties prefer substitution.

    Tie order is substitution, then deletion, then insertion — fixed so the
    breakdown is deterministic (total cost is unique regardless).
    """
    ref, hyp = list(ref), list(hyp)
    if not ref:
        raise ValueError("WER is undefined for an empty reference")
    m, n = len(ref), len(hyp)
    d = np.zeros((m + 1, n + 1), dtype=np.int64)
    d[:, 0] = np.arange(m + 1)
    d[0, :] = np.arange(n + 1)
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            sub = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i, j] = min(sub, d[i - 1, j] + 1, d[i, j - 1] + 1)
    subs = ins = dels = 0
    i, j = m, n
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WerBreakdown(substitutions=int(subs), insertions=int(ins), deletions=int(dels),
                        ref_len=m, wer=100.0 * (subs + ins + dels) / m)


def cmi_utterance(lang_tags) -> float:
    """100 * (N - max language count) / N over A/B-tagged tokens; 0 when N = 0."""
    counts = {"A": 0, "B": 0}
    for t in lang_tags:
        if t in counts:
            counts[t] += 1
    n = counts["A"] + counts["B"]
    if n == 0:
        return 0.0
    return 100.0 * (n - max(counts.values())) / n


@dataclass(frozen=True)
class CmiValue:
    pooled: float
    mean_utterance: float
    per_utterance: tuple[float, ...]


def cmi_corpus(manifest) -> CmiValue:
    """Both aggregates: the utterance formula on pooled corpus counts, and the
    mean of per-utterance values."""
    if not manifest.utterances:
        raise ValueError("CMI is undefined for an empty manifest")
    per = tuple(cmi_utterance(u.lang_tags) for u in manifest.utterances)
    pooled_tags = [t for u in manifest.utterances for t in u.lang_tags]
    return CmiValue(pooled=cmi_utterance(pooled_tags),
                    mean_utterance=float(np.mean(per)),
                    per_utterance=per)


# -- model evaluation -------------------------------------------------------

@dataclass
class DecodeConfig:
    mode: str = "greedy"  # "greedy" | "beam"
    beam: int = 8
    lm_weight: float = 0.5
    lm: object = None           # NGramLM, used when mode == "beam"
    lm_name: str | None = None  # provenance string recorded in reports

    def __post_init__(self):
        if self.mode not in ("greedy", "beam"):
            raise ValueError(f"decode mode must be 'greedy' or 'beam', got {self.mode!r}")
        if self.beam < 1:
            raise ValueError(f"beam must be >= 1, got {self.beam}")

    def to_json(self) -> dict:
        return {"mode": self.mode, "beam": self.beam, "lm_weight": self.lm_weight,
                "lm": self.lm_name}


def decode_manifest(model, head_id: str, manifest, decode: DecodeConfig | None = None,
                    batch_size: int = 64,
                    errors: dict[str, str] | None = None) -> dict[str, list[str]]:
    """Decode every utterance; returns {utterance id: symbol tokens}.

    With an ``errors`` dict, per-utterance failures are recorded there and
    skipped instead of raised.
    """
    decode = decode or DecodeConfig()
    vocab = model.vocabs[head_id]
    out: dict[str, list[str]] = {}
    utts = manifest.utterances
    for lo in range(0, len(utts), batch_size):
        chunk = utts[lo:lo + batch_size]
        try:
            lps, out_lens = net.forward_logprobs(model, [u.feats for u in chunk], head_id)
        except Exception as e:
            if errors is None:
                raise
            # isolate the failing utterances with single forwards
            for u in chunk:
                try:
                    lps1, lens1 = net.forward_logprobs(model, [u.feats], head_id)
                    out[u.id] = _decode_row(np.exp(lps1[head_id].data[0, : lens1[0]]),
                                            decode, vocab)
                except Exception as e1:
                    errors[u.id] = str(e1)
            continue
        arr = lps[head_id].data
        for i, u in enumerate(chunk):
            try:
                out[u.id] = _decode_row(np.exp(arr[i, : out_lens[i]]), decode, vocab)
            except Exception as e:
                if errors is None:
                    raise
                errors[u.id] = str(e)
    return out


def _decode_row(post: np.ndarray, decode: DecodeConfig, vocab) -> list[str]:
    if decode.mode == "greedy":
        idx = ctc.greedy_decode(post)
    else:
        idx = ctc.beam_decode(post, lm=decode.lm, beam=decode.beam,
                              lm_weight=decode.lm_weight, symbols=vocab.symbols)
    return vocab.decode(idx)


@dataclass
class EvalReport:
    corpus_wer: float
    substitutions: int
    insertions: int
    deletions: int
    ref_tokens: int
    n_utterances: int
    n_failed: int
    cmi: dict
    head_id: str
    checkpoint_checksum: str
    decode: dict
    per_utterance: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "corpus_wer": self.corpus_wer, "substitutions": self.substitutions,
            "insertions": self.insertions, "deletions": self.deletions,
            "ref_tokens": self.ref_tokens, "n_utterances": self.n_utterances,
            "n_failed": self.n_failed, "cmi": self.cmi, "head_id": self.head_id,
            "checkpoint_checksum": self.checkpoint_checksum, "decode": self.decode,
            "per_utterance": self.per_utterance,
        }

    def report_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def save(self, path) -> None:
        doc = self.to_json()
        doc["report_hash"] = self.report_hash()
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        doc.pop("report_hash", None)
        return cls(**doc)


def evaluate(model, head_id: str, manifest, decode: DecodeConfig | None = None) -> EvalReport:
    """Decode a manifest and score micro-averaged WER (edit sum / ref-token sum).

    An utterance whose decode raises is scored as all-deletions and flagged,
    never dropped.
    """
    decode = decode or DecodeConfig()
    if head_id not in model.heads:
        raise ValueError(f"unknown head {head_id!r}")
    if not manifest.utterances:
        raise ValueError("cannot evaluate on an empty manifest")
    vocab = model.vocabs[head_id]
    for u in manifest.utterances:
        for tok in u.transcript:
            if tok not in vocab.symbols:
                raise ValueError(
                    f"utterance {u.id!r}: token {tok!r} not in head {head_id!r} vocab")
    per = []
    totals = {"s": 0, "i": 0, "d": 0, "ref": 0}
    failed = 0
    errors: dict[str, str] = {}
    hyps = decode_manifest(model, head_id, manifest, decode, errors=errors)
    for u in manifest.utterances:
        if u.id in errors:
            failed += 1
            b = WerBreakdown(0, 0, len(u.transcript), len(u.transcript), 100.0)
            rec_err = errors[u.id]
        else:
            b = wer(u.transcript, hyps[u.id])
            rec_err = None
        totals["s"] += b.substitutions
        totals["i"] += b.insertions
        totals["d"] += b.deletions
        totals["ref"] += b.ref_len
        rec = {"id": u.id, "ref": list(u.transcript), "hyp": hyps.get(u.id, []),
               "wer": b.wer, "substitutions": b.substitutions,
               "insertions": b.insertions, "deletions": b.deletions,
               "failed": u.id in errors}
        if rec_err:
            rec["error"] = rec_err
        per.append(rec)
    cmi = cmi_corpus(manifest)
    return EvalReport(
        corpus_wer=100.0 * (totals["s"] + totals["i"] + totals["d"]) / totals["ref"],
        substitutions=totals["s"], insertions=totals["i"], deletions=totals["d"],
        ref_tokens=totals["ref"], n_utterances=len(manifest.utterances),
        n_failed=failed,
        cmi={"pooled": cmi.pooled, "mean_utterance": cmi.mean_utterance},
        head_id=head_id, checkpoint_checksum=net.model_checksum(model),
        decode=decode.to_json(), per_utterance=per)


def render_table(headers: list[str], rows: list[list[str]]) -> str:
    """Aligned plain-text table (first column left, the rest right-aligned)."""
    cells = [headers] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    out = []
    for ri, row in enumerate(cells):
        line = "  ".join(
            c.ljust(widths[i]) if i == 0 else c.rjust(widths[i])
            for i, c in enumerate(row))
        out.append(line.rstrip())
        if ri == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out)
