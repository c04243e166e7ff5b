"""Command-line surface: corpus generation, regime training, evaluation, suites.

One declarative JSON config describes a whole experiment (generator, corpora,
model, regimes, decoding, test sets); flags only override scalar fields via
``--set dotted.path=value``. Every command resolves the config against
defaults, validates it with field-path errors, and works inside a run
directory that receives a frozen copy of the resolved config.

Exit codes: 0 success, 1 runtime failure, 2 config/validation failure
(including missing artifacts). Failures print one machine-readable JSON
object to stderr: ``{"error": {"kind": ..., "message": ..., "field": ...}}``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import corpus, ctc, metrics, net, regimes

ENV_OUT_ROOT = "LWFS_OUT_ROOT"
_SPLITS = ("train", "dev", "test")
_SPLIT_SALT = {"train": 0, "test": 1, "dev": 2}


class CliError(Exception):
    """Failure with a stable exit code and a machine-readable payload."""

    kind = "runtime"
    code = 1

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field

    def payload(self) -> dict:
        err = {"kind": self.kind, "message": str(self)}
        if self.field:
            err["field"] = self.field
        return {"error": err}


class ConfigError(CliError):
    kind = "config"
    code = 2


# -- config schema and defaults ----------------------------------------------

DEFAULTS: dict = {
    "name": "run",
    "out": None,
    "seed": 1,
    "vocab_scope": "union",
    "generator": {
        "vocab_a": 10, "vocab_b": 10, "shared": 4,
        "switch_prob": 0.3, "utt_len": [3, 8], "frames_per_symbol": [2, 4],
        "noise_sigma": 0.3, "feature_dim": 8, "seed": 11,
        "confusable_dist": 0.9, "cs_a_coverage": 0.5,
    },
    "corpora": {
        "mono_a": {"mode": "monolingual-A", "train": 1000, "test": 200, "salt": 0},
        "mono_b": {"mode": "monolingual-B", "train": 400, "test": 200, "salt": 8},
        "cs": {"mode": "code-switched", "train": 800, "test": 200, "salt": 16},
        "pooled": {"pool": ["mono_a", "cs"]},
    },
    "model": {
        "conv_layers": 2, "conv_kernel": 3, "conv_channels": 16, "conv_stride": 1,
        "recurrent_layers": 2, "hidden_dim": 32,
    },
    "train": {
        "lr": 0.15, "epochs": 15, "batch_size": 32, "seed": None, "loss": "plain",
        "distill": None, "subsample_d": None, "lwf_warmup_epochs": 5,
        "early_stop_patience": None,
    },
    "decode": {"mode": "greedy", "beam": 8, "lm_weight": 0.5, "lm": None},
    "regimes": [
        {"id": "Exp1", "kind": "Exp1", "train_corpus": "mono_a"},
        {"id": "Exp2", "kind": "Exp2", "train_corpus": "cs"},
        {"id": "Exp3", "kind": "Exp3", "train_corpus": "pooled"},
        {"id": "Exp4", "kind": "Exp4", "train_corpus": "cs", "base": "Exp1"},
        {"id": "Exp5", "kind": "Exp5", "train_corpus": "cs", "base": "Exp3"},
        {"id": "LWF", "kind": "LWF", "train_corpus": "cs", "base": "Exp1"},
    ],
    "test_sets": ["mono_a", "cs"],
}

_CORPUS_ENTRY_DEFAULTS = {"train": 0, "dev": 0, "test": 0, "salt": None}
_REGIME_ENTRY_DEFAULTS = {"dev_corpus": None, "base": None, "head": None, "train": {}}

# type schema: plain type, tuple = union (None allowed via type(None)),
# dict = nested object, [spec] = list of spec. Ranges/enums are enforced by
# the dataclass constructors; here we pin shapes and reject unknown fields.
_NUM = "num"  # int or float
_TRAIN_SCHEMA = {
    "lr": _NUM, "epochs": int, "batch_size": int, "seed": (int, type(None)),
    "loss": str, "subsample_d": (_NUM, type(None)), "lwf_warmup_epochs": int,
    "early_stop_patience": (int, type(None)),
    "distill": ({"mode": str, "alpha": _NUM, "gamma": _NUM}, type(None)),
}
_SCHEMA = {
    "name": str,
    "out": (str, type(None)),
    "seed": int,
    "vocab_scope": str,
    "generator": {
        "vocab_a": int, "vocab_b": int, "shared": int, "switch_prob": _NUM,
        "utt_len": [int], "frames_per_symbol": [int], "noise_sigma": _NUM,
        "feature_dim": int, "seed": int, "confusable_dist": (_NUM, type(None)),
        "cs_a_coverage": _NUM,
    },
    "corpora": None,  # validated by _validate_corpora
    "model": {
        "conv_layers": int, "conv_kernel": int, "conv_channels": int,
        "conv_stride": int, "recurrent_layers": int, "hidden_dim": int,
    },
    "train": _TRAIN_SCHEMA,
    "decode": {"mode": str, "beam": int, "lm_weight": _NUM, "lm": (str, type(None))},
    "regimes": None,  # validated by _validate_regimes
    "test_sets": [str],
}


def deep_merge(base: dict, override: dict) -> dict:
    """Nested dicts merge key-wise; every other value replaces."""
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _type_ok(value, spec) -> bool:
    if spec is _NUM:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if spec is int:
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, spec)


def _type_name(spec) -> str:
    if isinstance(spec, tuple):
        return " or ".join(_type_name(s) for s in spec)
    if spec is _NUM:
        return "number"
    if isinstance(spec, dict):
        return "object"
    if isinstance(spec, list):
        return f"list of {_type_name(spec[0])}"
    return "null" if spec is type(None) else spec.__name__

def _check(value, spec, path: str) -> None:
    if isinstance(spec, tuple):
        for s in spec:
            if isinstance(s, dict):
                if isinstance(value, dict):
                    _check(value, s, path)
                    return
            elif isinstance(s, list):
                if isinstance(value, list):
                    _check(value, s, path)
                    return
            elif _type_ok(value, s):
                return
        raise ConfigError(f"expected {_type_name(spec)}", field=path)
    if isinstance(spec, dict):
        if not isinstance(value, dict):
            raise ConfigError("expected object", field=path)
        for k in value:
            if k not in spec:
                raise ConfigError(f"unknown field {k!r}", field=f"{path}.{k}" if path else k)
        for k, sub in spec.items():
            if k in value:
                _check(value[k], sub, f"{path}.{k}" if path else k)
        return
    if isinstance(spec, list):
        if not isinstance(value, list):
            raise ConfigError("expected list", field=path)
        for i, item in enumerate(value):
            _check(item, spec[0], f"{path}[{i}]")
        return
    if not _type_ok(value, spec):
        raise ConfigError(f"expected {_type_name(spec)}", field=path)


def _validate_corpora(corpora, path="corpora") -> dict:
    if not isinstance(corpora, dict) or not corpora:
        raise ConfigError("expected a non-empty object", field=path)
    out = {}
    seen_streams = set()
    for idx, (name, entry) in enumerate(corpora.items()):
        p = f"{path}.{name}"
        if not isinstance(entry, dict):
            raise ConfigError("expected object", field=p)
        if "pool" in entry:
            _check(entry, {"pool": [str]}, p)
            if not entry["pool"]:
                raise ConfigError("pool must name at least one corpus", field=f"{p}.pool")
            out[name] = {"pool": list(entry["pool"])}
            continue
        entry = deep_merge(_CORPUS_ENTRY_DEFAULTS, entry)
        _check(entry, {"mode": str, "train": int, "dev": int, "test": int,
                       "salt": (int, type(None))}, p)
        if "mode" not in entry:
            raise ConfigError("corpus needs a 'mode' (or a 'pool')", field=p)
        if entry["mode"] not in corpus.MODES:
            raise ConfigError(f"mode must be one of {corpus.MODES}", field=f"{p}.mode")
        if all(entry[s] <= 0 for s in _SPLITS):
            raise ConfigError("corpus has no utterances in any split", field=p)
        if entry["salt"] is None:
            entry["salt"] = idx * 8
        stream = (entry["mode"], entry["salt"])
        if stream in seen_streams:
            raise ConfigError(f"duplicate (mode, salt) stream {stream}", field=f"{p}.salt")
        seen_streams.add(stream)
        out[name] = entry
    for name, entry in out.items():
        for member in entry.get("pool", ()):
            if member not in out:
                raise ConfigError(f"pool member {member!r} is not a corpus",
                                  field=f"{path}.{name}.pool")
            if "pool" in out[member]:
                raise ConfigError("pools cannot nest", field=f"{path}.{name}.pool")
    return out


def _validate_regimes(entries, corpora: dict, path="regimes") -> list[dict]:
    if not isinstance(entries, list) or not entries:
        raise ConfigError("expected a non-empty list", field=path)
    out, ids = [], set()
    for i, entry in enumerate(entries):
        p = f"{path}[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError("expected object", field=p)
        entry = deep_merge(_REGIME_ENTRY_DEFAULTS, entry)
        _check(entry, {"id": str, "kind": str, "train_corpus": str,
                       "dev_corpus": (str, type(None)), "base": (str, type(None)),
                       "head": (str, type(None)), "train": _TRAIN_SCHEMA}, p)
        for req in ("id", "kind", "train_corpus"):
            if req not in entry:
                raise ConfigError(f"missing required field {req!r}", field=f"{p}.{req}")
        if entry["id"] in ids:
            raise ConfigError(f"duplicate regime id {entry['id']!r}", field=f"{p}.id")
        ids.add(entry["id"])
        for key in ("train_corpus", "dev_corpus"):
            cname = entry[key]
            if cname is not None and cname not in corpora:
                raise ConfigError(f"unknown corpus {cname!r}", field=f"{p}.{key}")
        out.append(entry)
    for i, entry in enumerate(out):
        if entry["base"] is not None and entry["base"] not in ids:
            raise ConfigError(f"unknown base regime {entry['base']!r}",
                              field=f"{path}[{i}].base")
    return out


def load_config(path: str | None, sets: list[str]) -> dict:
    user: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
    cfg = deep_merge(DEFAULTS, user)
    # user-supplied corpora/regimes/test_sets replace the default experiment
    for key in ("corpora", "regimes", "test_sets"):
        if key in user:
            cfg[key] = user[key]
    for expr in sets:
        key, sep, raw = expr.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects dotted.path=value, got {expr!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare strings pass through
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            nxt = node.get(part) if isinstance(node, dict) else None
            if not isinstance(nxt, dict):
                raise ConfigError("--set path does not name a config object", field=key)
            node = nxt
        if isinstance(value, (dict, list)):
            raise ConfigError("--set only overrides scalar fields", field=key)
        node[parts[-1]] = value
    return cfg


def validate_config(cfg: dict) -> dict:
    """Shape-check, fill per-entry defaults, return the resolved config."""
    for k in cfg:
        if k not in _SCHEMA:
            raise ConfigError(f"unknown field {k!r}", field=k)
    for k, spec in _SCHEMA.items():
        if spec is not None and k in cfg:
            _check(cfg[k], spec, k)
    cfg = dict(cfg)
    cfg["corpora"] = _validate_corpora(cfg["corpora"])
    cfg["regimes"] = _validate_regimes(cfg["regimes"], cfg["corpora"])
    if cfg["vocab_scope"] not in ("union", "A", "B"):
        raise ConfigError("must be 'union', 'A', or 'B'", field="vocab_scope")
    for i, name in enumerate(cfg["test_sets"]):
        if name not in cfg["corpora"]:
            raise ConfigError(f"unknown corpus {name!r}", field=f"test_sets[{i}]")
    # construct the dataclasses once so value errors surface with field paths
    # before any corpus or training work starts
    _gen_spec(cfg)
    _model_config(cfg)
    _decode_template(cfg)
    _train_config(cfg, {}, field="train")
    for i, entry in enumerate(cfg["regimes"]):
        tc = _train_config(cfg, entry["train"],
                           seed_override=entry["train"].get("seed"),
                           field=f"regimes[{i}].train")
        corpora = {"train": entry["train_corpus"]}
        if entry["dev_corpus"] is not None:
            corpora["dev"] = entry["dev_corpus"]
        try:
            regimes.RegimeSpec(id=entry["id"], kind=entry["kind"], corpora=corpora,
                               train=tc, base=entry["base"], head_id=entry["head"])
        except ValueError as e:
            raise ConfigError(str(e), field=f"regimes[{i}]") from None
    return cfg


# -- resolved pieces ----------------------------------------------------------

def _gen_spec(cfg: dict) -> corpus.GenSpec:
    g = dict(cfg["generator"])
    for key in ("utt_len", "frames_per_symbol"):
        g[key] = tuple(g[key])
    try:
        return corpus.GenSpec(**g)
    except ValueError as e:
        raise ConfigError(str(e), field="generator") from None


def _model_config(cfg: dict) -> net.ModelConfig:
    try:
        return net.ModelConfig(input_dim=cfg["generator"]["feature_dim"],
                               **cfg["model"])
    except ValueError as e:
        raise ConfigError(str(e), field="model") from None


def _train_config(cfg: dict, override: dict, seed_override=None,
                  field: str = "train") -> regimes.TrainConfig:
    merged = deep_merge(cfg["train"], override)
    if merged.get("seed") is None:
        merged["seed"] = cfg["seed"]
    if seed_override is not None:
        merged["seed"] = seed_override
    try:
        return regimes.TrainConfig.from_json(merged)
    except ValueError as e:
        raise ConfigError(str(e), field=field) from None


def _decode_template(cfg: dict) -> metrics.DecodeConfig:
    d = cfg["decode"]
    try:
        tpl = metrics.DecodeConfig(mode=d["mode"], beam=d["beam"],
                                   lm_weight=d["lm_weight"], lm_name=d["lm"])
    except ValueError as e:
        raise ConfigError(str(e), field="decode") from None
    if d["lm"] is not None and d["mode"] != "beam":
        raise ConfigError("an LM needs decode.mode 'beam'", field="decode.lm")
    return tpl


def _load_lm(spec_str: str, run_dir: Path) -> ctc.NGramLM:
    cand = Path(spec_str)
    if not cand.exists():
        cand = run_dir / "lm" / f"{spec_str}.json"
    if not cand.exists():
        raise ConfigError(f"LM not found: {spec_str!r} (no such file, and no "
                          f"{cand})", field="decode.lm")
    return ctc.NGramLM.load(cand)


def _decode_config(cfg: dict, run_dir: Path) -> metrics.DecodeConfig:
    tpl = _decode_template(cfg)
    if cfg["decode"]["lm"] is not None:
        return replace(tpl, lm=_load_lm(cfg["decode"]["lm"], run_dir))
    return tpl


def _resolve_run_dir(cfg: dict, out_flag: str | None) -> Path:
    if out_flag:
        return Path(out_flag)
    if cfg["out"]:
        return Path(cfg["out"])
    root = os.environ.get(ENV_OUT_ROOT, "runs")
    return Path(root) / cfg["name"]


_FROZEN_CORE = ("seed", "generator", "corpora", "model", "vocab_scope", "train")


def freeze_config(cfg: dict, run_dir: Path) -> None:
    """Write the resolved config into the run dir; reject core drift.

    Artifact-producing sections must not change once a run dir exists;
    regimes/test_sets/decode may grow, and the frozen copy follows them.
    """
    run_dir.mkdir(parents=True, exist_ok=True)
    frozen_path = run_dir / "config.resolved.json"
    if frozen_path.exists():
        with open(frozen_path, encoding="utf-8") as fh:
            old = json.load(fh)
        for key in _FROZEN_CORE:
            if json.dumps(old.get(key), sort_keys=True) != json.dumps(cfg[key], sort_keys=True):
                raise ConfigError(
                    f"run dir {run_dir} was created with a different {key!r} "
                    f"config; use a fresh run dir (or delete this one)", field=key)
    with open(frozen_path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, sort_keys=True, indent=1)
        fh.write("\n")


# -- corpora on disk ----------------------------------------------------------

def _materialize_corpora(cfg: dict, run_dir: Path) -> dict[str, dict[str, corpus.Manifest]]:
    """Load (or generate and save) every configured corpus split."""
    spec = _gen_spec(cfg)
    cdir = run_dir / "corpora"
    cdir.mkdir(parents=True, exist_ok=True)
    built: dict[str, dict[str, corpus.Manifest]] = {}
    for name, entry in cfg["corpora"].items():
        if "pool" in entry:
            continue
        built[name] = {}
        for split in _SPLITS:
            n = entry[split]
            if n <= 0:
                continue
            path = cdir / f"{name}_{split}.jsonl"
            if path.exists():
                built[name][split] = corpus.load_manifest(path)
            else:
                man = corpus.generate(spec, n, entry["mode"],
                                      salt=entry["salt"] + _SPLIT_SALT[split])
                corpus.save_manifest(man, path)
                built[name][split] = man
    for name, entry in cfg["corpora"].items():
        if "pool" not in entry:
            continue
        members = entry["pool"]
        built[name] = {}
        for split in _SPLITS:
            if all(split in built[m] for m in members):
                built[name][split] = corpus.pool(*[built[m][split] for m in members])
    return built


def _flat_corpora(built: dict) -> dict[str, corpus.Manifest]:
    flat = {}
    for name, splits in built.items():
        if "train" in splits:
            flat[name] = splits["train"]
        if "dev" in splits:
            flat[f"{name}:dev"] = splits["dev"]
    return flat


def _regime_specs(cfg: dict, built: dict) -> list[regimes.RegimeSpec]:
    specs = []
    for i, entry in enumerate(cfg["regimes"]):
        p = f"regimes[{i}]"
        tc = _train_config(cfg, entry["train"],
                           seed_override=entry["train"].get("seed"), field=f"{p}.train")
        if "train" not in built.get(entry["train_corpus"], {}):
            raise ConfigError(f"corpus {entry['train_corpus']!r} has no train split",
                              field=f"{p}.train_corpus")
        corpora = {"train": entry["train_corpus"]}
        if entry["dev_corpus"] is not None:
            if "dev" not in built.get(entry["dev_corpus"], {}):
                raise ConfigError(f"corpus {entry['dev_corpus']!r} has no dev split",
                                  field=f"{p}.dev_corpus")
            corpora["dev"] = f"{entry['dev_corpus']}:dev"
        try:
            specs.append(regimes.RegimeSpec(id=entry["id"], kind=entry["kind"],
                                            corpora=corpora, train=tc,
                                            base=entry["base"], head_id=entry["head"]))
        except ValueError as e:
            raise ConfigError(str(e), field=p) from None
    return specs


def _test_set_specs(cfg: dict, built: dict) -> list[regimes.TestSetSpec]:
    out = []
    for i, name in enumerate(cfg["test_sets"]):
        if "test" not in built.get(name, {}):
            raise ConfigError(f"corpus {name!r} has no test split",
                              field=f"test_sets[{i}]")
        # code-switched test sets read a model's cs head when it has one
        if cfg["corpora"][name].get("mode") == "code-switched":
            heads = ("cs", "pooled", "mono")
        else:
            heads = ("mono", "pooled", "cs")
        out.append(regimes.TestSetSpec(id=name, manifest=built[name]["test"],
                                       preferred_heads=heads))
    return out


# -- commands -----------------------------------------------------------------

def cmd_generate(cfg: dict, args) -> int:
    run_dir = _resolve_run_dir(cfg, args.out)
    freeze_config(cfg, run_dir)
    built = _materialize_corpora(cfg, run_dir)
    headers = ["corpus", "split", "utts", "tokens", "cmi_pooled", "cmi_mean"]
    rows, any_pooled = [], False
    for name, splits in built.items():
        derived = "pool" in cfg["corpora"][name]
        any_pooled = any_pooled or derived
        for split, man in splits.items():
            v = metrics.cmi_corpus(man)
            tokens = sum(len(u.transcript) for u in man.utterances)
            label = f"{name}*" if derived else name
            rows.append([label, split, str(len(man)), str(tokens),
                         f"{v.pooled:.2f}", f"{v.mean_utterance:.2f}"])
    print(metrics.render_table(headers, rows))
    if any_pooled:
        print("* derived by pooling, not written to disk")
    print(f"corpora under {run_dir / 'corpora'}")
    return 0


def _write_train_log(path: Path, history: regimes.TrainHistory) -> None:
    lines = []
    ft = history.extra.get("fine_tune")
    if ft:
        lines.append(f"fine-tune of base checkpoint, lr {ft['effective_lr']:g}")
    if "ym_hash" in history.extra:
        lines.append(f"lwf warm-up epochs {history.extra['warmup_epochs']}, "
                     f"pseudo-label hash {history.extra['ym_hash'][:12]}")
    for e in history.epochs:
        parts = [f"epoch {e['epoch']}", f"mean_loss {e['mean_loss']:.6f}"]
        if e.get("dev_wer") is not None:
            parts.append(f"dev_wer {e['dev_wer']:.2f}")
        if "phase" in e:
            parts.append(e["phase"])
        parts.append(f"wall {e['wall_time']:.2f}s")
        lines.append("  ".join(parts))
    lines.append(f"final_checksum {history.final_checksum}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_train(cfg: dict, args) -> int:
    run_dir = _resolve_run_dir(cfg, args.out)
    freeze_config(cfg, run_dir)
    by_id = {e["id"]: i for i, e in enumerate(cfg["regimes"])}
    if args.regime not in by_id:
        raise ConfigError(f"regime {args.regime!r} is not in the config "
                          f"(have {sorted(by_id)})", field="regimes")
    built = _materialize_corpora(cfg, run_dir)
    specs = _regime_specs(cfg, built)
    spec = specs[by_id[args.regime]]
    flat = _flat_corpora(built)
    vocab = corpus.build_vocab(_gen_spec(cfg), cfg["vocab_scope"])
    base_model = None
    if spec.base:
        base_ckpt = run_dir / "regimes" / spec.base / "model.lwfs"
        if not base_ckpt.exists():
            raise ConfigError(f"base regime {spec.base!r} has no checkpoint at "
                              f"{base_ckpt}; train it first", field=f"regimes.{spec.id}.base")
        base_model = net.load_checkpoint(base_ckpt)
    try:
        model, history = regimes._train_regime(_model_config(cfg), vocab, spec,
                                               flat, base_model)
    except (ValueError, corpus.ManifestError) as e:
        raise CliError(f"training regime {spec.id!r} failed: {e}") from None
    out = run_dir / "regimes" / spec.id
    out.mkdir(parents=True, exist_ok=True)
    net.save_checkpoint(model, out / "model.lwfs")
    history.save(out / "history.json")
    _write_train_log(out / "train.log", history)
    losses = history.epoch_losses()
    first = f"{losses[0]:.4f}" if losses else "n/a"
    last = f"{losses[-1]:.4f}" if losses else "n/a"
    print(f"regime {spec.id} ({spec.kind}) trained: {len(losses)} epochs, "
          f"loss {first} -> {last}")
    ft = history.extra.get("fine_tune")
    if ft:
        print(f"fine-tune lr {ft['effective_lr']:g}")
    print(f"checkpoint {out / 'model.lwfs'}")
    print(f"checksum {history.final_checksum}")
    return 0


def cmd_evaluate(cfg: dict, args) -> int:
    run_dir = _resolve_run_dir(cfg, args.out)
    freeze_config(cfg, run_dir)
    if (args.regime is None) == (args.checkpoint is None):
        raise ConfigError("pass exactly one of --regime or --checkpoint")
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
        label = ckpt.stem
    else:
        ckpt = run_dir / "regimes" / args.regime / "model.lwfs"
        label = args.regime
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    built = _materialize_corpora(cfg, run_dir)
    if "test" not in built.get(args.test, {}):
        raise ConfigError(f"corpus {args.test!r} has no test split",
                          field=f"corpora.{args.test}.test")
    decode = _decode_config(cfg, run_dir)
    if args.lm:
        decode = replace(decode, mode="beam", lm=_load_lm(args.lm, run_dir),
                         lm_name=args.lm)
    try:
        model = net.load_checkpoint(ckpt)
    except net.CheckpointError as e:
        raise ConfigError(f"unreadable checkpoint {ckpt}: {e}") from None
    head = args.head or regimes._eval_head(model, ("mono", "pooled", "cs"))
    if head not in model.heads:
        raise ConfigError(f"model has heads {sorted(model.heads)}, not {head!r}")
    try:
        report = metrics.evaluate(model, head, built[args.test]["test"], decode)
    except ValueError as e:
        raise CliError(f"evaluation failed: {e}") from None
    rdir = run_dir / "reports"
    rdir.mkdir(parents=True, exist_ok=True)
    rpath = rdir / f"eval_{label}_{args.test}.json"
    report.save(rpath)
    print(metrics.render_table(
        ["test set", "head", "wer", "sub", "ins", "del", "ref_tokens", "failed"],
        [[args.test, head, f"{report.corpus_wer:.2f}", str(report.substitutions),
          str(report.insertions), str(report.deletions), str(report.ref_tokens),
          str(report.n_failed)]]))
    if decode.lm is not None:
        print(f"beam {decode.beam} with LM {decode.lm_name!r}, lm_weight {decode.lm_weight}")
    print(f"report {rpath}")
    return 0


def cmd_lm_train(cfg: dict, args) -> int:
    run_dir = _resolve_run_dir(cfg, args.out)
    freeze_config(cfg, run_dir)
    built = _materialize_corpora(cfg, run_dir)
    if "train" not in built.get(args.corpus, {}):
        raise ConfigError(f"corpus {args.corpus!r} has no train split", field="corpora")
    man = built[args.corpus]["train"]
    lm = ctc.train_ngram_lm([u.transcript for u in man.utterances],
                            n=args.order, smoothing=args.smoothing)
    lm_dir = run_dir / "lm"
    lm_dir.mkdir(parents=True, exist_ok=True)
    name = args.name or f"{args.corpus}_lm"
    path = lm_dir / f"{name}.json"
    lm.save(path)
    print(f"{args.order}-gram LM over {len(lm.vocab)} symbols, "
          f"{len(lm.counts)} contexts, smoothing {args.smoothing:g}")
    print(f"lm {path}")
    return 0


# -- suite, verdicts, plots ---------------------------------------------------

def _wer_cell(matrix: dict, regime: str, test: str) -> float | None:
    cell = matrix.get(regime)
    if not isinstance(cell, dict) or "error" in cell:
        return None
    v = cell.get(test)
    return v if isinstance(v, (int, float)) else None


def _trend_tests(cfg: dict) -> tuple[str | None, str | None]:
    """First monolingual and first code-switched test set, by corpus mode."""
    mono = cs = None
    for name in cfg["test_sets"]:
        mode = cfg["corpora"][name].get("mode")
        if mode in ("monolingual-A", "monolingual-B") and mono is None:
            mono = name
        if mode == "code-switched" and cs is None:
            cs = name
    return mono, cs


def compute_verdicts(cfg: dict, matrix: dict) -> dict:
    """PASS/FAIL trend checks over the WER matrix (single-run medians)."""
    kinds = {e["id"]: e["kind"] for e in cfg["regimes"]}
    bases = {e["id"]: e["base"] for e in cfg["regimes"]}
    mono_t, cs_t = _trend_tests(cfg)
    verdicts: dict[str, dict] = {}

    def first_of(kind, base_kind=None):
        for rid, k in kinds.items():
            if k != kind:
                continue
            if base_kind and kinds.get(bases.get(rid)) != base_kind:
                continue
            return rid
        return None

    exp1, exp4 = first_of("Exp1"), first_of("Exp4", base_kind="Exp1")
    lwf = first_of("LWF")
    v: dict = {"verdict": None}
    if not (mono_t and cs_t):
        v["detail"] = "needs one monolingual and one code-switched test set"
    elif not (exp1 and exp4):
        v["detail"] = "needs an Exp1 regime and an Exp4 fine-tune of it"
    else:
        e1m, e1c = _wer_cell(matrix, exp1, mono_t), _wer_cell(matrix, exp1, cs_t)
        e4m, e4c = _wer_cell(matrix, exp4, mono_t), _wer_cell(matrix, exp4, cs_t)
        if None in (e1m, e1c, e4m, e4c):
            v["detail"] = "missing WER cells"
        else:
            v["verdict"] = bool(e4m - e1m >= 2.0 and e1c - e4c >= 2.0)
            v["detail"] = (f"{exp4} mono {e4m:.1f} vs {exp1} {e1m:.1f} "
                           f"({e4m - e1m:+.1f}, need >= +2); "
                           f"{exp4} cs {e4c:.1f} vs {exp1} {e1c:.1f} "
                           f"({e4c - e1c:+.1f}, need <= -2)")
    verdicts["forgetting_reproduced"] = v

    v = {"verdict": None}
    if not (mono_t and cs_t):
        v["detail"] = "needs one monolingual and one code-switched test set"
    elif not (exp1 and exp4 and lwf):
        v["detail"] = "needs Exp1, Exp4 and LWF regimes"
    else:
        e1c = _wer_cell(matrix, exp1, cs_t)
        e4m = _wer_cell(matrix, exp4, mono_t)
        lm_, lc = _wer_cell(matrix, lwf, mono_t), _wer_cell(matrix, lwf, cs_t)
        if None in (e1c, e4m, lm_, lc):
            v["detail"] = "missing WER cells"
        else:
            v["verdict"] = bool(lm_ <= e4m and lc <= e1c - 2.0)
            v["detail"] = (f"{lwf} mono {lm_:.1f} vs {exp4} {e4m:.1f} (need <=); "
                           f"{lwf} cs {lc:.1f} vs {exp1} {e1c:.1f} - 2 (need <=)")
    verdicts["lwf_mitigation"] = v

    v = {"verdict": None}
    by_d: list[tuple[float, str, str]] = []
    for entry in cfg["regimes"]:
        if entry["kind"] != "Exp5":
            continue
        d = entry["train"].get("subsample_d") or cfg["train"].get("subsample_d") or 100.0
        by_d.append((float(d), entry["id"], entry["base"]))
    by_d.sort()
    if not mono_t:
        v["detail"] = "needs a monolingual test set"
    elif len(by_d) < 2 or by_d[0][0] == by_d[-1][0] or by_d[0][2] != by_d[-1][2]:
        v["detail"] = "needs two Exp5 regimes with different subsample_d and a shared base"
    else:
        (dlo, rlo, base), (dhi, rhi, _) = by_d[0], by_d[-1]
        bm = _wer_cell(matrix, base, mono_t)
        lo, hi = _wer_cell(matrix, rlo, mono_t), _wer_cell(matrix, rhi, mono_t)
        if None in (bm, lo, hi):
            v["detail"] = "missing WER cells"
        else:
            v["verdict"] = bool(lo - bm < hi - bm)
            v["detail"] = (f"D={dlo:g} degrades mono by {lo - bm:+.1f}, "
                           f"D={dhi:g} by {hi - bm:+.1f} (need less at D={dlo:g})")
    verdicts["subsampling_mitigation"] = v
    return verdicts


def render_verdicts(verdicts: dict) -> str:
    names = {"forgetting_reproduced": "forgetting reproduced",
             "lwf_mitigation": "lwf mitigation",
             "subsampling_mitigation": "subsampling mitigation"}
    lines = ["trend verdicts"]
    for key, label in names.items():
        v = verdicts[key]
        word = "n/a" if v["verdict"] is None else ("yes" if v["verdict"] else "no")
        lines.append(f"  {label}: {word}")
        lines.append(f"    {v['detail']}")
    return "\n".join(lines)


def _render_matrix(cfg: dict, matrix: dict) -> str:
    tests = cfg["test_sets"]
    headers = ["regime", "kind"] + [f"wer:{t}" for t in tests]
    kinds = {e["id"]: e["kind"] for e in cfg["regimes"]}
    rows = []
    for rid in (e["id"] for e in cfg["regimes"]):
        row = [rid, kinds[rid]]
        cell = matrix.get(rid, {})
        if isinstance(cell, dict) and "error" in cell:
            row += ["ERR"] * len(tests)
        else:
            for t in tests:
                v = cell.get(t) if isinstance(cell, dict) else None
                if isinstance(v, (int, float)):
                    row.append(f"{v:.2f}")
                elif isinstance(v, dict):
                    row.append("ERR")
                else:
                    row.append("-")
        rows.append(row)
    return metrics.render_table(headers, rows)


def emit_plots(cfg: dict, run_dir: Path, matrix: dict) -> list[str]:
    """Static loss-curve and WER-bar PNGs; returns run-dir-relative paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pdir = run_dir / "plots"
    pdir.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(7, 4.5))
    plotted = False
    for entry in cfg["regimes"]:
        hist = run_dir / "regimes" / entry["id"] / "history.json"
        if not hist.exists():
            continue
        h = regimes.TrainHistory.load(hist)
        losses = h.epoch_losses()
        if losses:
            ax.plot(range(1, len(losses) + 1), losses, marker=".", label=entry["id"])
            plotted = True
    if plotted:
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean training loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(pdir / "loss_curves.png", dpi=120)
        written.append("plots/loss_curves.png")
    plt.close(fig)

    tests = cfg["test_sets"]
    rids = [e["id"] for e in cfg["regimes"]]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    width = 0.8 / max(1, len(tests))
    plotted = False
    for ti, t in enumerate(tests):
        xs, ys = [], []
        for ri, rid in enumerate(rids):
            v = _wer_cell(matrix, rid, t)
            if v is not None:
                xs.append(ri + ti * width)
                ys.append(v)
        if ys:
            ax.bar(xs, ys, width=width, label=f"test {t}")
            plotted = True
    if plotted:
        ax.set_xticks([i + width * (len(tests) - 1) / 2 for i in range(len(rids))])
        ax.set_xticklabels(rids)
        ax.set_ylabel("WER (%)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(pdir / "wer_bars.png", dpi=120)
        written.append("plots/wer_bars.png")
    plt.close(fig)
    return written


def _finish_suite(cfg: dict, run_dir: Path, result: dict) -> int:
    verdicts = compute_verdicts(cfg, result["matrix"])
    plots = emit_plots(cfg, run_dir, result["matrix"])
    payload = dict(result)
    payload["verdicts"] = verdicts
    payload["plots"] = plots
    with open(run_dir / "suite.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
    table = _render_matrix(cfg, result["matrix"])
    verdict_text = render_verdicts(verdicts)
    (run_dir / "summary.txt").write_text(table + "\n\n" + verdict_text + "\n",
                                         encoding="utf-8")
    print(table)
    print()
    print(verdict_text)
    if result["failures"]:
        print()
        for rid, msg in sorted(result["failures"].items()):
            print(f"FAILED {rid}: {msg}")
    print()
    print(f"suite artifacts under {run_dir}")
    if result["failures"]:
        payload = {"error": {"kind": "runtime",
                             "message": f"{len(result['failures'])} regime cell(s) failed",
                             "cells": result["failures"]}}
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return 1
    return 0


def cmd_suite(cfg: dict, args) -> int:
    run_dir = _resolve_run_dir(cfg, args.out)
    freeze_config(cfg, run_dir)
    built = _materialize_corpora(cfg, run_dir)
    specs = _regime_specs(cfg, built)
    tests = _test_set_specs(cfg, built)
    vocab = corpus.build_vocab(_gen_spec(cfg), cfg["vocab_scope"])
    decode = _decode_config(cfg, run_dir)
    result = regimes.run_experiment_suite(_model_config(cfg), vocab, specs,
                                          _flat_corpora(built), tests, run_dir,
                                          decode=decode, jobs=args.jobs)
    return _finish_suite(cfg, run_dir, result)


def cmd_report(cfg: dict, args) -> int:
    """Re-render matrix, verdicts and plots from artifacts already on disk."""
    run_dir = _resolve_run_dir(cfg, args.out)
    freeze_config(cfg, run_dir)
    matrix: dict = {}
    reports: dict = {}
    found = False
    for entry in cfg["regimes"]:
        rid = entry["id"]
        rdir = run_dir / "regimes" / rid
        matrix[rid] = {}
        if not (rdir / "model.lwfs").exists():
            matrix[rid] = {"error": "no checkpoint on disk"}
            continue
        found = True
        for t in cfg["test_sets"]:
            rpath = rdir / f"eval_{t}.json"
            if rpath.exists():
                rep = metrics.EvalReport.load(rpath)
                matrix[rid][t] = rep.corpus_wer
                reports.setdefault(rid, {})[t] = {
                    "path": str(rpath.relative_to(run_dir)),
                    "hash": rep.report_hash(), "head": rep.head_id}
    if not found:
        raise ConfigError(f"no regime artifacts under {run_dir / 'regimes'}; "
                          "run `lwfs suite` or `lwfs train` first")
    result = {"matrix": matrix, "reports": reports, "failures": {},
              "cmi": {}, "regimes": {e["id"]: e for e in cfg["regimes"]},
              "histories": {}}
    return _finish_suite(cfg, run_dir, result)


# -- entry point --------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", metavar="FILE",
                        help="JSON config; omitted fields take defaults")
    common.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                        help="override one scalar config field (repeatable)")
    common.add_argument("--out", metavar="DIR",
                        help=f"run directory (default: config.out, then "
                             f"${ENV_OUT_ROOT}/<name>)")
    ap = argparse.ArgumentParser(
        prog="lwfs",
        description="Catastrophic-forgetting experiments on synthetic "
                    "code-switched sequence recognition.")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common],
                   help="write corpus manifests and print CMI per corpus")
    tp = sub.add_parser("train", parents=[common], help="train one regime")
    tp.add_argument("regime", help="regime id from the config")
    ep = sub.add_parser("evaluate", parents=[common],
                        help="evaluate a checkpoint on a test set")
    ep.add_argument("--regime", help="regime id whose checkpoint to evaluate")
    ep.add_argument("--checkpoint", help="explicit checkpoint path")
    ep.add_argument("--test", required=True, help="corpus name (its test split)")
    ep.add_argument("--head", help="output head id (default: mono/pooled/cs)")
    ep.add_argument("--lm", help="LM name under <run>/lm or a path; forces beam decoding")
    sp = sub.add_parser("suite", parents=[common],
                        help="train/evaluate every regime, emit matrix, verdicts, plots")
    sp.add_argument("--jobs", type=int, default=1,
                    help="parallel training processes (default 1)")
    lp = sub.add_parser("lm-train", parents=[common],
                        help="train an n-gram LM on a corpus train split")
    lp.add_argument("--corpus", required=True, help="corpus name from the config")
    lp.add_argument("--order", type=int, default=3, help="n-gram order (default 3)")
    lp.add_argument("--smoothing", type=float, default=0.1,
                    help="add-k smoothing (default 0.1)")
    lp.add_argument("--name", help="LM file name (default <corpus>_lm)")
    sub.add_parser("report", parents=[common],
                   help="re-render matrix/verdicts/plots from existing artifacts")
    return ap


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "suite": cmd_suite,
    "lm-train": cmd_lm_train,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = validate_config(load_config(args.config, args.set))
        return _COMMANDS[args.command](cfg, args)
    except CliError as e:
        print(json.dumps(e.payload(), sort_keys=True), file=sys.stderr)
        return e.code
    except Exception as e:  # noqa: BLE001 - last-resort runtime contract
        payload = {"error": {"kind": "runtime",
                             "message": f"{type(e).__name__}: {e}"}}
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
