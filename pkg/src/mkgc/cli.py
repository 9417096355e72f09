"""Command-line entry points.

    mkgc generate-synthetic --out DIR
    mkgc train --data DIR --out RUN [--config FILE] [--mode full] [--seed 0]
    mkgc evaluate --checkpoint RUN/best.ckpt --data DIR [--split test]
    mkgc propose-pairs --checkpoint CKPT --data DIR [--K 10]
    mkgc attention-report --checkpoint CKPT --data DIR
    mkgc ablate --data DIR --out DIR [--seeds 0,1,2]
    mkgc sweep-alignment --data DIR --out DIR --ratios 0.2,0.6,1.0

Exit codes: 0 success, 2 invalid input data, 3 numeric failure, 4 usage error.
Training options come from defaults, then ``--config`` (key = value lines),
then ``--set key=value``, then the dedicated flags; later sources win.
"""
import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from . import trainer as tr
from .alignment import (SimilarityConfig, append_pair_report, load_text_embeddings, propose_all,
                        recovery_report, write_text_embeddings)
from .datasets import TEXT_FILE, dataset_hashes, load_dataset, save_dataset, write_id_maps
from .encoder import attention_report, encode
from .errors import InputDataError, NumericError, UsageError
from .kg import build_fused, mask_alignment
from .kgc import Metrics
from .synthetic import SyntheticSpec, generate_synthetic, stats_table

EXIT_OK, EXIT_DATA, EXIT_NUMERIC, EXIT_USAGE = 0, 2, 3, 4
MANIFEST = "manifest.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- configuration ---------------------------------------------------------------

_FIELDS = {f.name: f for f in dataclasses.fields(tr.TrainConfig)}


def _field_type(name):
    t = _FIELDS[name].type
    if isinstance(t, str):
        t = {"int": int, "float": float, "bool": bool, "str": str}[t]
    return t


def parse_value(name, text):
    """Convert a config string to the type of TrainConfig field ``name``."""
    if name not in _FIELDS:
        raise UsageError(f"unknown config key {name!r}")
    text = text.strip()
    t = _field_type(name)
    if text.lower() in ("none", "null", "") and _FIELDS[name].default is None:
        return None
    try:
        if t is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return t(text)
    except ValueError:
        raise UsageError(f"bad value {text!r} for {name}") from None


def read_config(path):
    out = {}
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        out[key] = parse_value(key, value)
    return out


def _add_config_flags(p):
    p.add_argument("--config", help="key = value file with TrainConfig entries")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config entry (repeatable)")
    for name, f in _FIELDS.items():
        p.add_argument("--" + name.replace("_", "-"), dest="cfg_" + name, default=None,
                       metavar=name.upper(), help=argparse.SUPPRESS if name not in ("mode", "seed", "epochs") else
                       f"(default {f.default})")


def effective_config(args):
    values = {}
    if args.config:
        values.update(read_config(args.config))
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip().replace("-", "_")
        values[key] = parse_value(key, value)
    for name in _FIELDS:
        raw = getattr(args, "cfg_" + name)
        if raw is not None:
            values[name] = parse_value(name, raw)
    try:
        return tr.TrainConfig(**values)
    except InputDataError as e:
        raise UsageError(str(e)) from None


# --- shared helpers ----------------------------------------------------------------

def code_version():
    """Package version plus a short digest of the installed sources."""
    h = hashlib.sha256()
    here = os.path.dirname(os.path.abspath(__file__))
    for name in sorted(os.listdir(here)):
        if name.endswith(".py"):
            with open(os.path.join(here, name), "rb") as f:
                h.update(name.encode() + f.read())
    return f"{__version__}+g{h.hexdigest()[:12]}"


def load_training_data(directory, split_seed=0):
    ds = load_dataset(directory, split_seed)
    text = None
    if ds.text_path:
        fused = build_fused(ds.kgs, ds.seed_pairs)
        text = load_text_embeddings(ds.text_path, fused, ds.labels())
    return tr.TrainingData(ds.kgs, ds.seed_pairs, text, ds.truth_pairs), ds


def _prepare_out(out, force):
    manifest = os.path.join(out, MANIFEST)
    if os.path.exists(manifest) and not force:
        with open(manifest, encoding="utf-8") as f:
            status = json.load(f).get("status")
        if status == "complete":
            raise UsageError(f"{out} holds a completed run; pass --force to overwrite")
    os.makedirs(out, exist_ok=True)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_text(path, text):
    with open(path, "w", encoding="utf-8") as f:
        f.write(text.rstrip("\n") + "\n")


def _ratios(text):
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad list of numbers: {text!r}") from None
    if not vals:
        raise UsageError("empty list")
    return vals


def _ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad list of integers: {text!r}") from None


def _manifest(cfg, args, data_dir, status, extra=None):
    m = {"command": args.command, "config": cfg.to_dict(), "split_seed": args.split_seed,
         "data": os.path.abspath(data_dir), "dataset_hashes": dataset_hashes(data_dir),
         "code_version": code_version(), "status": status}
    m.update(extra or {})
    return m


def matrix_table(langs, mat):
    head = f"{'':<8}" + "".join(f"{l:>10}" for l in langs)
    rows = [f"{a:<8}" + "".join(f"{v:>10.4f}" for v in row) for a, row in zip(langs, mat)]
    return "\n".join([head] + rows)


def average_metrics(metrics):
    """Mean of several Metrics (per language and pooled)."""
    langs = list(metrics[0].per_language)
    per = {l: Metrics(float(np.mean([m.per_language[l].mrr for m in metrics])),
                      float(np.mean([m.per_language[l].hits1 for m in metrics])),
                      float(np.mean([m.per_language[l].hits10 for m in metrics])),
                      metrics[0].per_language[l].n) for l in langs}
    return Metrics(float(np.mean([m.mrr for m in metrics])), float(np.mean([m.hits1 for m in metrics])),
                   float(np.mean([m.hits10 for m in metrics])), metrics[0].n, per)


def subsample_seeds(pairs, ratio, seed):
    """Deterministic subset of ``round(ratio * |pairs|)`` seed pairs, in original order."""
    if not 0.0 < ratio <= 1.0:
        raise UsageError(f"ratio must be in (0, 1], got {ratio}")
    k = int(np.floor(ratio * len(pairs) + 0.5))
    idx = np.sort(np.random.default_rng(seed).choice(len(pairs), size=k, replace=False))
    return [pairs[i] for i in idx]


# --- commands ---------------------------------------------------------------------------

def cmd_generate_synthetic(args):
    _prepare_out(args.out, args.force)
    spec = SyntheticSpec(languages=args.languages, base_entities=args.entities, base_relations=args.relations,
                         base_triples=args.triples, coverage=tuple(_ratios(args.coverage)),
                         seed_alignment_ratio=args.seed_ratio, noise_ratio=args.noise, text_dim=args.text_dim)
    data = generate_synthetic(spec, args.seed)
    save_dataset(args.out, data.kgs, data.seed_pairs, data.truth_pairs)
    if data.text:
        write_text_embeddings(os.path.join(args.out, TEXT_FILE), data.kgs, data.text)
    table = stats_table(data.kgs, data.seed_pairs)
    _write_text(os.path.join(args.out, "stats.txt"), table)
    spec_dict = dataclasses.asdict(spec)
    spec_dict["seed"] = args.seed
    _write_json(os.path.join(args.out, "synthetic.json"), spec_dict)
    print(table)
    return EXIT_OK


def cmd_train(args):
    cfg = effective_config(args)
    data, _ = load_training_data(args.data, args.split_seed)
    out = args.out
    last, best_path = os.path.join(out, "last.ckpt"), os.path.join(out, "best.ckpt")
    state = best = None
    if args.resume and os.path.exists(last):
        state = tr.load_checkpoint(last, data)
        best = tr.load_checkpoint(best_path, data) if os.path.exists(best_path) else None
        cfg = state.cfg
        if args.cfg_epochs is not None:  # only the epoch budget may change on resume
            cfg = dataclasses.replace(cfg, epochs=parse_value("epochs", args.cfg_epochs))
            state.cfg = cfg
    else:
        _prepare_out(out, args.force)
        for name in ("train_log.jsonl", "proposed_pairs.tsv"):
            if os.path.exists(os.path.join(out, name)):
                os.remove(os.path.join(out, name))
    _write_json(os.path.join(out, MANIFEST), _manifest(cfg, args, args.data, "running"))
    write_id_maps(out, data.fused)
    log_path = os.path.join(out, "train_log.jsonl")
    pairs_path = os.path.join(out, "proposed_pairs.tsv")
    last_epoch = [state.epoch if state else 0]

    def on_epoch(st, rep):
        last_epoch[0] = st.epoch
        tr.reports_to_jsonl(log_path, [rep])
        if rep.npg_called:
            append_pair_report(pairs_path, data.fused, st.proposals, st.epoch)
        tr.save_checkpoint(st, last)
        if st.best_epoch == st.epoch:
            tr.save_checkpoint(st, best_path)
        if not args.quiet:
            v = rep.valid["macro_avg"]["mrr"] if rep.valid else float("nan")
            print(f"epoch {rep.epoch:>3}  J_K {rep.jk:.4f}  J_A {rep.ja:.4f}  "
                  f"pairs {rep.pairs_accepted:>4}  valid MRR {v:.4f}", file=sys.stderr)

    best, _ = tr.train(data, cfg, state=state, on_epoch=on_epoch, best=best)
    if not os.path.exists(best_path):
        tr.save_checkpoint(best, best_path)
    metrics = tr.evaluate_state(best, data, "test")
    _write_text(os.path.join(out, "metrics.json"), metrics.to_json())
    _write_text(os.path.join(out, "metrics.txt"), metrics.table())
    _write_json(os.path.join(out, MANIFEST), _manifest(
        cfg, args, args.data, "complete", {"best_epoch": best.epoch, "epochs_run": last_epoch[0]}))
    print(metrics.table())
    return EXIT_OK


def _load_state(args):
    data, ds = load_training_data(args.data, args.split_seed)
    if not os.path.exists(args.checkpoint):
        raise InputDataError(f"checkpoint not found: {args.checkpoint}")
    return tr.load_checkpoint(args.checkpoint, data), data, ds


def cmd_evaluate(args):
    state, data, ds = _load_state(args)
    metrics = tr.evaluate_state(state, data, args.split)
    if args.out:
        _write_text(args.out, metrics.to_json())
    print(metrics.to_json())
    print(metrics.table())
    return EXIT_OK


def cmd_propose_pairs(args):
    state, data, ds = _load_state(args)
    cfg = state.cfg
    K = args.K if args.K is not None else cfg.csls_k
    sim_cfg = SimilarityConfig(K=K, use_text=cfg.use_text and data.text is not None)
    structural = encode(data.fused, state.params_a).vectors
    existing = {p.key() for p in data.fused.pairs}
    proposals = propose_all(data.fused, structural, data.text, sim_cfg, existing)
    out = args.out or "proposed_pairs.tsv"
    if os.path.exists(out):
        os.remove(out)
    append_pair_report(out, data.fused, proposals, state.epoch)
    # recovery of held-out ground truth when available, else of a fresh mask of the seeds
    if data.truth_keys is not None:
        seeds = {p.key() for p in data.fused.pairs}
        held = [p for p in ds.truth_pairs if p.key() not in seeds]
        rec = recovery_report(data.fused, held, structural, data.text, sim_cfg)
        precision = (sum(p.to_alignment().key() in data.truth_keys for p in proposals) / len(proposals)
                     if proposals else None)
    else:
        view = mask_alignment(data.fused, cfg.mask_ratio, cfg.seed)
        rec = recovery_report(data.fused, view.masked_pairs, encode(view, state.params_a).vectors,
                              data.text, sim_cfg)
        precision = None
    report = {"proposed": len(proposals), "precision": precision,
              "recovery": {"hits1": rec.hits1, "hits10": rec.hits10, "mrr": rec.mrr, "n": rec.n}}
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_attention_report(args):
    state, data, ds = _load_state(args)
    graph = data.plain if args.zero_alignment else tr.completion_graph(state, data)
    mat = attention_report(graph, state.params_k)
    langs = list(data.fused.languages)
    obj = {"languages": langs, "matrix": [[round(float(v), 10) for v in row] for row in mat]}
    if args.out:
        _write_json(args.out, obj)
    print(json.dumps(obj, indent=2))
    print(matrix_table(langs, mat))
    return EXIT_OK


def cmd_ablate(args):
    cfg = effective_config(args)
    data, _ = load_training_data(args.data, args.split_seed)
    _prepare_out(args.out, args.force)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    bad = set(modes) - set(tr.MODES)
    if bad:
        raise UsageError(f"unknown modes: {sorted(bad)}")
    seeds = _ints(args.seeds) if args.seeds else [cfg.seed]
    results = {}
    for mode in modes:
        runs = [tr.run_ablation(data, dataclasses.replace(cfg, seed=s), modes=(mode,))[mode] for s in seeds]
        results[mode] = average_metrics(runs)
    table = tr.ablation_table(results)
    _write_json(os.path.join(args.out, "ablation.json"),
                {mode: m.to_json_dict() for mode, m in results.items()})
    _write_text(os.path.join(args.out, "ablation.txt"), table)
    _write_json(os.path.join(args.out, MANIFEST), _manifest(cfg, args, args.data, "complete",
                                                            {"modes": modes, "seeds": seeds}))
    print(table)
    return EXIT_OK


def sweep(data_dir, cfg, ratios, seeds, split_seed=0):
    """ratio -> seed-averaged test Metrics, training on a subsample of the seed pairs."""
    full, ds = load_training_data(data_dir, split_seed)
    out = {}
    for ratio in ratios:
        runs = []
        for s in seeds:
            pairs = subsample_seeds(ds.seed_pairs, ratio, s)
            data = tr.TrainingData(ds.kgs, pairs, full.text, ds.truth_pairs)
            best, _ = tr.train(data, dataclasses.replace(cfg, seed=s))
            runs.append(tr.evaluate_state(best, data, "test"))
        out[ratio] = average_metrics(runs)
    return out


def cmd_sweep_alignment(args):
    cfg = effective_config(args)
    ratios = _ratios(args.ratios)
    seeds = _ints(args.seeds) if args.seeds else [cfg.seed]
    _prepare_out(args.out, args.force)
    results = sweep(args.data, cfg, ratios, seeds, args.split_seed)
    lines = ["ratio\tlang\thits1\thits10\tmrr"]
    for ratio, m in results.items():
        for lang, lm in list(m.per_language.items()) + [("macro_avg", m.macro())]:
            lines.append(f"{ratio:.4f}\t{lang}\t{lm.hits1:.4f}\t{lm.hits10:.4f}\t{lm.mrr:.4f}")
    _write_json(os.path.join(args.out, "sweep.json"),
                {f"{r:.4f}": m.to_json_dict() for r, m in results.items()})
    _write_text(os.path.join(args.out, "sweep.tsv"), "\n".join(lines))
    _write_json(os.path.join(args.out, MANIFEST), _manifest(cfg, args, args.data, "complete",
                                                            {"ratios": ratios, "seeds": seeds}))
    print("\n".join(lines))
    return EXIT_OK


# --- parser ------------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="mkgc", description="Multilingual KG completion with self-supervised alignment.")
    p.add_argument("--version", action="version", version=f"mkgc {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate-synthetic", help="write a synthetic multilingual dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--languages", type=int, default=3)
    g.add_argument("--entities", type=int, default=200)
    g.add_argument("--relations", type=int, default=10)
    g.add_argument("--triples", type=int, default=2000)
    g.add_argument("--coverage", default="1.0,0.6,0.3")
    g.add_argument("--seed-ratio", type=float, default=0.4)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--text-dim", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate_synthetic)

    t = sub.add_parser("train", help="train and write a run directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--split-seed", type=int, default=0)
    t.add_argument("--force", action="store_true")
    t.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    t.add_argument("--quiet", action="store_true")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("evaluate", cmd_evaluate, "filtered ranking metrics of a checkpoint"),
                                 ("propose-pairs", cmd_propose_pairs, "CSLS mutual-nearest alignment pairs"),
                                 ("attention-report", cmd_attention_report, "language x language attention")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--checkpoint", required=True)
        c.add_argument("--data", required=True)
        c.add_argument("--split-seed", type=int, default=0)
        c.add_argument("--out")
        if name == "evaluate":
            c.add_argument("--split", choices=("valid", "test"), default="test")
        if name == "propose-pairs":
            c.add_argument("--K", type=int)
        if name == "attention-report":
            c.add_argument("--zero-alignment", action="store_true", help="control run without align edges")
        c.set_defaults(func=func)

    a = sub.add_parser("ablate", help="train every ablation mode and compare")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--modes", default="plain-gnn,r-gnn,no-ssl,full")
    a.add_argument("--seeds")
    a.add_argument("--split-seed", type=int, default=0)
    a.add_argument("--force", action="store_true")
    _add_config_flags(a)
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sweep-alignment", help="test metrics as the seed alignment ratio varies")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ratios", default="0.2,0.4,0.6,0.8,1.0")
    s.add_argument("--seeds")
    s.add_argument("--split-seed", type=int, default=0)
    s.add_argument("--force", action="store_true")
    _add_config_flags(s)
    s.set_defaults(func=cmd_sweep_alignment)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("missing command; see mkgc --help")
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputDataError, OSError) as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
