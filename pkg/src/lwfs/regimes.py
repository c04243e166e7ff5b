"""Training regimes: SGD loop, fine-tuning variants, LWF, and the suite runner.

Baselines: Exp1 trains on monolingual-A, Exp2 on code-switched, Exp3 on the
pooled corpus, all from scratch. Exp4 fine-tunes Exp1 on CS data, Exp5
fine-tunes Exp3; fine-tuning runs at 0.9x the base learning rate. KLD-FT
fine-tunes with a teacher-regularized loss. LWF adds a fresh CS head to a
single-head base, warms it up alone for a few epochs against frozen trunk and
base head, then trains everything jointly against frozen pseudo-labels.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import reduce
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import ctc, distill, metrics, net

_SUBSAMPLE_SALT = 17
_SHUFFLE_SALT = 29


@dataclass
class TrainConfig:
    lr: float = 3e-4
    epochs: int = 40
    batch_size: int = 64
    seed: int = 0
    loss: str = "plain"  # "plain" | "blended" | "scaled"
    distill: distill.DistillConfig | None = None
    subsample_d: float | None = None
    lwf_warmup_epochs: int = 5
    early_stop_patience: int | None = None

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        # epochs=0 is the degenerate no-op run (fine_tune contract)
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.loss not in ("plain", "blended", "scaled"):
            raise ValueError(f"loss must be plain|blended|scaled, got {self.loss!r}")
        if self.loss != "plain" and self.distill is None:
            raise ValueError(f"loss {self.loss!r} needs a distill config")
        if self.subsample_d is not None and not 0 < self.subsample_d <= 100:
            raise ValueError(f"subsample_d must be in (0, 100], got {self.subsample_d}")
        if self.lwf_warmup_epochs < 0:
            raise ValueError("lwf_warmup_epochs must be >= 0")

    def to_json(self) -> dict:
        d = asdict(self)
        if self.distill is not None:
            d["distill"] = self.distill.to_json()
        return d

    @classmethod
    def from_json(cls, obj) -> "TrainConfig":
        obj = dict(obj)
        if obj.get("distill"):
            obj["distill"] = distill.DistillConfig.from_json(obj["distill"])
        return cls(**obj)


REGIME_KINDS = ("Exp1", "Exp2", "Exp3", "Exp4", "Exp5", "LWF", "KLD-FT")
_FRESH_HEAD = {"Exp1": "mono", "Exp2": "cs", "Exp3": "pooled"}


@dataclass
class RegimeSpec:
    id: str
    kind: str
    corpora: dict  # {"train": corpus name, "dev": optional corpus name}
    train: TrainConfig
    base: str | None = None  # regime id whose checkpoint seeds this one
    head_id: str | None = None

    def __post_init__(self):
        if self.kind not in REGIME_KINDS:
            raise ValueError(f"kind must be one of {REGIME_KINDS}, got {self.kind!r}")
        needs_base = self.kind in ("Exp4", "Exp5", "LWF", "KLD-FT")
        if needs_base and not self.base:
            raise ValueError(f"regime {self.id!r} ({self.kind}) requires a base checkpoint")
        if not needs_base and self.base:
            raise ValueError(f"regime {self.id!r} ({self.kind}) must not name a base checkpoint")
        if "train" not in self.corpora:
            raise ValueError(f"regime {self.id!r} names no train corpus")
        if self.kind == "KLD-FT" and self.train.loss == "plain":
            raise ValueError(f"regime {self.id!r}: KLD-FT needs loss blended or scaled")

    def to_json(self) -> dict:
        return {"id": self.id, "kind": self.kind, "corpora": dict(self.corpora),
                "train": self.train.to_json(), "base": self.base, "head_id": self.head_id}


@dataclass
class TrainHistory:
    config: dict
    epochs: list = field(default_factory=list)
    batches: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    final_checksum: str = ""

    def epoch_losses(self) -> list[float]:
        return [e["mean_loss"] for e in self.epochs]

    def to_json(self) -> dict:
        return {"config": self.config, "epochs": self.epochs, "batches": self.batches,
                "extra": self.extra, "final_checksum": self.final_checksum}

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "TrainHistory":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))


# -- loop internals ---------------------------------------------------------

def _resolve_head(model: net.Model, head_id: str | None) -> str:
    if head_id is not None:
        if head_id not in model.heads:
            raise ValueError(f"unknown head {head_id!r}")
        return head_id
    if len(model.heads) != 1:
        raise ValueError(f"model has heads {sorted(model.heads)}; pick one explicitly")
    return next(iter(model.heads))


def _encode_corpus(vocab: net.Vocab, manifest) -> dict[str, list[int]]:
    enc = {}
    for u in manifest.utterances:
        try:
            enc[u.id] = vocab.encode(u.transcript)
        except ValueError as e:
            raise ValueError(f"utterance {u.id!r}: {e}") from None
    return enc


def _clear_grads(model: net.Model) -> None:
    for p in model.parameters():
        p.grad = None


def _sgd_step(model: net.Model, lr: float) -> None:
    for cid, params in model.collections().items():
        if not model.trainable.get(cid, True):
            continue
        for p in params.values():
            if p.grad is not None:
                p.data -= lr * p.grad


def sample_subset(manifest, d_percent: float, epoch: int, seed: int) -> list:
    """floor(N*d/100) utterances, drawn fresh per epoch without replacement."""
    if not 0 < d_percent <= 100:
        raise ValueError(f"d_percent must be in (0, 100], got {d_percent}")
    n = len(manifest.utterances)
    k = math.floor(n * d_percent / 100.0)
    if k < 1:
        raise ValueError(f"subset of {d_percent}% of {n} utterances would be empty")
    rng = np.random.default_rng([int(seed), int(epoch), _SUBSAMPLE_SALT])
    idx = rng.choice(n, size=k, replace=False)
    return [manifest.utterances[i] for i in idx]


def _epoch_utterances(manifest, cfg: TrainConfig, epoch: int) -> list:
    if cfg.subsample_d is not None:
        return sample_subset(manifest, cfg.subsample_d, epoch, cfg.seed)
    rng = np.random.default_rng([int(cfg.seed), int(epoch), _SHUFFLE_SALT])
    order = rng.permutation(len(manifest.utterances))
    return [manifest.utterances[i] for i in order]


def _mean_node(nodes: list) -> ad.Tensor:
    return ad.mul(reduce(ad.add, nodes), 1.0 / len(nodes))


def _sliced_logprob(lp: ad.Tensor, row: int, out_len: int) -> ad.Tensor:
    node = ad.slice_axis(lp, 0, row, row + 1)
    if out_len < lp.data.shape[1]:
        node = ad.slice_axis(node, 1, 0, int(out_len))
    return node


def _batch_loss(model, batch, enc, cfg: TrainConfig, head_id: str,
                teacher: distill.TeacherSnapshot | None):
    """Combined loss node for one batch plus its float components."""
    lps, out_lens = net.forward_logprobs(model, [u.feats for u in batch], head_id)
    lp = lps[head_id]
    ctc_nodes = [ctc.ctc_node(_sliced_logprob(lp, i, out_lens[i]), enc[u.id])
                 for i, u in enumerate(batch)]
    l_ctc = _mean_node(ctc_nodes)
    mode = _effective_loss(cfg)
    if mode == "plain":
        return l_ctc, {"ctc": float(l_ctc.data)}
    teacher_lp = teacher.capture(batch, head_id)
    kld_nodes = [distill.kld_node(teacher_lp[u.id], _sliced_logprob(lp, i, out_lens[i]))
                 for i, u in enumerate(batch)]
    l_kld = _mean_node(kld_nodes)
    if mode == "blended":
        total = distill.blended_loss(l_ctc, l_kld, cfg.distill.alpha)
    else:
        total = distill.scaled_loss(l_ctc, l_kld, cfg.distill.gamma)
    return total, {"ctc": float(l_ctc.data), "kld": float(l_kld.data)}


def _effective_loss(cfg: TrainConfig) -> str:
    """Boundary degeneracy: alpha=0 / gamma=0 ARE plain CTC, bit for bit."""
    if cfg.loss == "blended" and cfg.distill.alpha == 0.0:
        return "plain"
    if cfg.loss == "scaled" and cfg.distill.gamma == 0.0:
        return "plain"
    return cfg.loss


def _dev_wer(model: net.Model, head_id: str, manifest) -> float:
    hyps = metrics.decode_manifest(model, head_id, manifest)
    edits = refs = 0
    for u in manifest.utterances:
        b = metrics.wer(u.transcript, hyps[u.id])
        edits += b.substitutions + b.insertions + b.deletions
        refs += b.ref_len
    return 100.0 * edits / refs


def _epoch_record(model, epoch, losses, comps, dev, head_id, t0, extra=None) -> dict:
    rec = {
        "epoch": epoch,
        "mean_loss": float(np.mean(losses)),
        "components": {k: float(np.mean(v)) for k, v in comps.items()},
        "dev_wer": None if dev is None else _dev_wer(model, head_id, dev),
        "checksums": {cid: net.collection_checksum(model, cid)
                      for cid in sorted(model.collections())},
        "wall_time": time.perf_counter() - t0,
    }
    if extra:
        rec.update(extra)
    return rec


def train(model: net.Model, corpus, cfg: TrainConfig, dev=None,
          head_id: str | None = None,
          teacher: distill.TeacherSnapshot | None = None) -> tuple[net.Model, TrainHistory]:
    """SGD over epoch-shuffled batches. The input model is left untouched."""
    if not corpus.utterances:
        raise ValueError("cannot train on an empty corpus")
    head_id = _resolve_head(model, head_id)
    if _effective_loss(cfg) != "plain" and teacher is None:
        teacher = distill.TeacherSnapshot(model)
    model = net.clone(model)
    enc = _encode_corpus(model.vocabs[head_id], corpus)
    history = TrainHistory(config={"train": cfg.to_json(), "head_id": head_id})
    best_dev, since_best = math.inf, 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        utts = _epoch_utterances(corpus, cfg, epoch)
        losses, comps = [], {}
        for lo in range(0, len(utts), cfg.batch_size):
            batch = utts[lo:lo + cfg.batch_size]
            loss, parts = _batch_loss(model, batch, enc, cfg, head_id, teacher)
            ad.backward(loss)
            _sgd_step(model, cfg.lr)
            _clear_grads(model)
            losses.append(float(loss.data))
            for k, v in parts.items():
                comps.setdefault(k, []).append(v)
        rec = _epoch_record(model, epoch, losses, comps, dev, head_id, t0,
                            extra={"subset_size": len(utts)})
        history.epochs.append(rec)
        if cfg.early_stop_patience is not None and rec["dev_wer"] is not None:
            if rec["dev_wer"] < best_dev - 1e-12:
                best_dev, since_best = rec["dev_wer"], 0
            else:
                since_best += 1
                if since_best >= cfg.early_stop_patience:
                    break
    history.final_checksum = net.model_checksum(model)
    return model, history


def fine_tune(base: net.Model, cs_corpus, cfg: TrainConfig, dev=None,
              head_id: str | None = None,
              teacher: distill.TeacherSnapshot | None = None,
              lr: float | None = None) -> tuple[net.Model, TrainHistory]:
    """Same loop as train at 0.9x the configured lr (pass ``lr`` to override)."""
    eff = replace(cfg, lr=(lr if lr is not None else 0.9 * cfg.lr))
    if _effective_loss(eff) != "plain" and teacher is None:
        teacher = distill.TeacherSnapshot(base)
    model, history = train(base, cs_corpus, eff, dev=dev, head_id=head_id, teacher=teacher)
    history.extra["fine_tune"] = {"base_lr": cfg.lr, "effective_lr": eff.lr}
    return model, history


# -- learning without forgetting ---------------------------------------------

def _hash_labels(labels: dict[str, list[int]]) -> str:
    blob = json.dumps({k: labels[k] for k in sorted(labels)}).encode()
    return hashlib.sha256(blob).hexdigest()


def lwf_train(pretrained: net.Model, cs_corpus, cfg: TrainConfig,
              cs_vocab: net.Vocab | None = None, dev=None,
              cs_head: str = "cs") -> tuple[net.Model, TrainHistory]:
    """Three steps: pseudo-label the CS corpus with the pristine base model,
    warm up a fresh CS head alone, then train all collections jointly on
    L_CTC(Y_m) + L_CTC(Y_c).
    """
    if not cs_corpus.utterances:
        raise ValueError("cannot train on an empty corpus")
    if len(pretrained.heads) != 1:
        raise ValueError(f"LWF base must have exactly one head, got {sorted(pretrained.heads)}")
    mono_head = next(iter(pretrained.heads))
    if cs_vocab is None:
        cs_vocab = pretrained.vocabs[mono_head]

    # frozen targets from the untouched base model, decoded exactly once
    decoded = metrics.decode_manifest(pretrained, mono_head, cs_corpus)
    mono_vocab = pretrained.vocabs[mono_head]
    ym = {uid: mono_vocab.encode(toks) for uid, toks in decoded.items()}
    ym_hash = _hash_labels(ym)

    model = net.clone(pretrained)
    net.add_head(model, cs_head, cs_vocab, seed=cfg.seed)
    yc = _encode_corpus(cs_vocab, cs_corpus)

    warmup = min(cfg.lwf_warmup_epochs, cfg.epochs)
    history = TrainHistory(config={"train": cfg.to_json(), "mono_head": mono_head,
                                   "cs_head": cs_head})
    history.extra.update({"ym_hash": ym_hash, "warmup_epochs": warmup,
                          "mono_head": mono_head, "cs_head": cs_head})

    def joint_batch(batch):
        lps, out_lens = net.forward_logprobs(model, [u.feats for u in batch],
                                             [mono_head, cs_head])
        m_nodes, c_nodes = [], []
        for i, u in enumerate(batch):
            m_nodes.append(ctc.ctc_node(
                _sliced_logprob(lps[mono_head], i, out_lens[i]), ym[u.id]))
            c_nodes.append(ctc.ctc_node(
                _sliced_logprob(lps[cs_head], i, out_lens[i]), yc[u.id]))
        l_m, l_c = _mean_node(m_nodes), _mean_node(c_nodes)
        return ad.add(l_m, l_c), float(l_m.data), float(l_c.data)

    net.set_trainable(model, [net.SHARED, mono_head], False)
    for epoch in range(cfg.epochs):
        if epoch == warmup:
            net.set_trainable(model, [net.SHARED, mono_head], True)
        t0 = time.perf_counter()
        utts = _epoch_utterances(cs_corpus, cfg, epoch)
        losses, comps = [], {"ym": [], "yc": []}
        for lo in range(0, len(utts), cfg.batch_size):
            batch = utts[lo:lo + cfg.batch_size]
            loss, lm_val, lc_val = joint_batch(batch)
            ad.backward(loss)
            _sgd_step(model, cfg.lr)
            _clear_grads(model)
            losses.append(float(loss.data))
            comps["ym"].append(lm_val)
            comps["yc"].append(lc_val)
            history.batches.append({"epoch": epoch, "total": float(loss.data),
                                    "ym": lm_val, "yc": lc_val})
        history.epochs.append(_epoch_record(
            model, epoch, losses, comps, dev, cs_head, t0,
            extra={"phase": "warmup" if epoch < warmup else "joint",
                   "ym_hash": _hash_labels(ym)}))
    net.set_trainable(model, [net.SHARED, mono_head], True)
    history.final_checksum = net.model_checksum(model)
    return model, history


# -- suite runner -------------------------------------------------------------

@dataclass
class TestSetSpec:
    id: str
    manifest: object
    preferred_heads: tuple = ("mono", "pooled", "cs")


def _eval_head(model: net.Model, preferred) -> str:
    for hid in preferred:
        if hid in model.heads:
            return hid
    if len(model.heads) == 1:
        return next(iter(model.heads))
    raise ValueError(f"no preferred head among {sorted(model.heads)}")


def _train_regime(model_cfg: net.ModelConfig, vocab: net.Vocab, spec: RegimeSpec,
                  corpora: dict, base_model: net.Model | None):
    train_corpus = corpora[spec.corpora["train"]]
    dev = corpora.get(spec.corpora.get("dev"))
    if spec.kind in _FRESH_HEAD:
        head = spec.head_id or _FRESH_HEAD[spec.kind]
        cfg = replace(model_cfg, heads=((head, vocab),))
        fresh = net.build_model(cfg, seed=spec.train.seed)
        return train(fresh, train_corpus, spec.train, dev=dev, head_id=head)
    if base_model is None:
        raise ValueError(f"regime {spec.id!r} needs its base model")
    if spec.kind in ("Exp4", "Exp5"):
        return fine_tune(base_model, train_corpus, spec.train, dev=dev,
                         head_id=spec.head_id)
    if spec.kind == "KLD-FT":
        head = _resolve_head(base_model, spec.head_id)
        teacher = distill.TeacherSnapshot(base_model)
        return fine_tune(base_model, train_corpus, spec.train, dev=dev,
                         head_id=head, teacher=teacher)
    if spec.kind == "LWF":
        return lwf_train(base_model, train_corpus, spec.train, cs_vocab=vocab, dev=dev)
    raise ValueError(f"unhandled regime kind {spec.kind!r}")


def _regime_paths(out_dir: Path, regime_id: str) -> tuple[Path, Path]:
    d = out_dir / "regimes" / regime_id
    return d / "model.lwfs", d / "history.json"


def _suite_train_worker(args) -> str:
    """Executes one regime cell in a worker process; artifacts go to disk."""
    model_cfg, vocab, spec, corpora, base_ckpt, out_dir = args
    base_model = net.load_checkpoint(base_ckpt) if base_ckpt else None
    model, history = _train_regime(model_cfg, vocab, spec, corpora, base_model)
    ckpt, hist = _regime_paths(Path(out_dir), spec.id)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    net.save_checkpoint(model, ckpt)
    history.save(hist)
    return spec.id


def _dependency_waves(regimes: list[RegimeSpec]) -> list[list[RegimeSpec]]:
    # a base id not among these regimes may exist on disk; resolved at run time
    by_id = {r.id: r for r in regimes}
    waves, placed = [], set()
    remaining = list(regimes)
    while remaining:
        wave = [r for r in remaining
                if not r.base or r.base in placed or r.base not in by_id]
        if not wave:
            cyc = [r.id for r in remaining]
            raise ValueError(f"regime dependency cycle among {cyc}")
        waves.append(wave)
        placed.update(r.id for r in wave)
        remaining = [r for r in remaining if r.id not in placed]
    return waves


def run_experiment_suite(model_cfg: net.ModelConfig, vocab: net.Vocab,
                         regimes: list[RegimeSpec], corpora: dict,
                         test_sets: list[TestSetSpec], out_dir,
                         decode: metrics.DecodeConfig | None = None,
                         jobs: int = 1) -> dict:
    """Train (or reuse) every regime, evaluate on every test set.

    Each cell is resumable: an existing checkpoint skips training, an
    existing eval report skips evaluation. Failures are recorded per cell and
    the suite continues.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = [r.id for r in regimes]
    if len(set(ids)) != len(ids):
        raise ValueError("regime ids must be unique")
    failures: dict[str, str] = {}
    trained: set[str] = set()

    for wave in _dependency_waves(regimes):
        todo = []
        for spec in wave:
            ckpt, hist = _regime_paths(out_dir, spec.id)
            if ckpt.exists() and hist.exists():
                trained.add(spec.id)
                continue
            if spec.base and spec.base in failures:
                failures[spec.id] = f"base regime {spec.base!r} failed"
                continue
            base_ckpt = None
            if spec.base:
                base_ckpt = _regime_paths(out_dir, spec.base)[0]
                if not base_ckpt.exists():
                    failures[spec.id] = f"missing base checkpoint {base_ckpt}"
                    continue
            todo.append((model_cfg, vocab, spec, corpora,
                         str(base_ckpt) if base_ckpt else None, str(out_dir)))
        if not todo:
            continue
        if jobs > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = {pool.submit(_suite_train_worker, t): t[2].id for t in todo}
                for fut, rid in futures.items():
                    try:
                        fut.result()
                        trained.add(rid)
                    except Exception as e:
                        failures[rid] = str(e)
        else:
            for t in todo:
                try:
                    _suite_train_worker(t)
                    trained.add(t[2].id)
                except Exception as e:
                    failures[t[2].id] = str(e)

    matrix: dict[str, dict] = {}
    reports: dict[str, dict] = {}
    for spec in regimes:
        matrix[spec.id] = {}
        if spec.id in failures:
            matrix[spec.id] = {"error": failures[spec.id]}
            continue
        ckpt, _ = _regime_paths(out_dir, spec.id)
        try:
            model = net.load_checkpoint(ckpt)
        except Exception as e:
            matrix[spec.id] = {"error": str(e)}
            continue
        for test in test_sets:
            rpath = ckpt.parent / f"eval_{test.id}.json"
            try:
                if rpath.exists():
                    report = metrics.EvalReport.load(rpath)
                else:
                    head = _eval_head(model, test.preferred_heads)
                    report = metrics.evaluate(model, head, test.manifest, decode)
                    report.save(rpath)
                matrix[spec.id][test.id] = report.corpus_wer
                reports.setdefault(spec.id, {})[test.id] = {
                    "path": str(rpath.relative_to(out_dir)),
                    "hash": report.report_hash(), "head": report.head_id}
            except Exception as e:
                matrix[spec.id][test.id] = {"error": str(e)}

    cmi = {}
    for name, man in corpora.items():
        if man.utterances:
            v = metrics.cmi_corpus(man)
            cmi[name] = {"pooled": v.pooled, "mean_utterance": v.mean_utterance}
    for test in test_sets:
        v = metrics.cmi_corpus(test.manifest)
        cmi[f"test:{test.id}"] = {"pooled": v.pooled, "mean_utterance": v.mean_utterance}

    return {
        "matrix": matrix,
        "cmi": cmi,
        "regimes": {r.id: r.to_json() for r in regimes},
        "reports": reports,
        "histories": {r.id: str((out_dir / "regimes" / r.id / "history.json").relative_to(out_dir))
                      for r in regimes if r.id in trained},
        "failures": failures,
    }
