"""``hierdual`` experiment driver.

Every subcommand reads an INI config (see the README), writes its artifacts
into ``--out`` atomically, and finishes with ``manifest.json`` plus
``summary.txt``. Exit codes: 0 success, 2 config error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import gzip
import io
import json
import logging
import os
import sys
import tempfile
from typing import Optional

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, HierarchySource, load_config
from .construct import (
    check_separation,
    construct_gaussian,
    construct_onehot,
    min_feasible_dimension,
    trial_seed,
)
from .evaluation import (
    dimension_sweep,
    expected_recall,
    frozen_eval_pairs,
    handcrafted_dimension,
    recall_at_k,
    recall_at_relevant,
)
from .hierarchy import Hierarchy, TreeSpec, build_perfect_tree, load_edge_list, sample_subdag, write_edge_list
from .sampler import PairBatch, SamplingKind, SamplingStrategy
from .trainer import Checkpoint, config_hash, train, write_training_log
from .wordnet import load_wordnet_nouns

log = logging.getLogger("hierdual")

COMMANDS = ("gen-tree", "ingest", "construct", "train", "eval", "sweep-dim", "sweep-p", "ablate")


class Run:
    """Output directory bookkeeping: atomic artifact writes and the manifest."""

    def __init__(self, out_dir: str, cfg: ExperimentConfig, deterministic: bool):
        self.out = out_dir
        self.cfg = cfg
        self.deterministic = deterministic
        self.artifacts: list[str] = []
        self.summary: list[str] = []
        self.extra: dict = {}
        os.makedirs(out_dir, exist_ok=True)

    def write(self, name: str, data) -> None:
        payload = data.encode() if isinstance(data, str) else data
        fd, tmp = tempfile.mkstemp(dir=self.out, prefix=f".{name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(payload)
            os.replace(tmp, os.path.join(self.out, name))
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        if name not in self.artifacts:
            self.artifacts.append(name)

    def write_text(self, name: str, fill) -> None:
        buf = io.StringIO()
        fill(buf)
        self.write(name, buf.getvalue())

    def write_binary(self, name: str, fill) -> None:
        buf = io.BytesIO()
        fill(buf)
        self.write(name, buf.getvalue())

    def note(self, line: str) -> None:
        self.summary.append(line)
        log.info(line)

    def finish(self, status: str, error: Optional[str] = None) -> None:
        manifest = {
            "tool": "hierdual",
            "version": __version__,
            "command": self.cfg.command,
            "seed": self.cfg.seed,
            "deterministic": self.deterministic,
            "config": self.cfg.resolved,
            "status": status,
            "partial": status != "ok",
            "error": error,
            "artifacts": list(self.artifacts),
            **self.extra,
        }
        self.write("summary.txt", "\n".join(self.summary + ([f"FAILED: {error}"] if error else [])) + "\n")
        self.write("manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _open_text(path: str):
    return gzip.open(path, "rt") if path.endswith(".gz") else open(path)


def load_hierarchy(src: HierarchySource) -> Hierarchy:
    if src.height is not None:
        h = build_perfect_tree(TreeSpec(src.height, src.width))
        if src.cap is not None:
            h = Hierarchy.from_edges(h.node_count, h.edges, labels=h.node_labels, cap=src.cap)
    elif src.fmt == "wordnet":
        data = os.path.join(src.path, "data.noun") if os.path.isdir(src.path) else src.path
        index = os.path.join(os.path.dirname(data), "index.noun")
        with _open_text(data) as d:
            if os.path.exists(index):
                with _open_text(index) as i:
                    h = load_wordnet_nouns(d, i, cap=src.cap)
            else:
                h = load_wordnet_nouns(d, cap=src.cap)
    else:
        with _open_text(src.path) as f:
            h = load_edge_list(f, cap=src.cap)
    if src.subsample is not None and src.subsample < h.node_count:
        h = sample_subdag(h, src.subsample, seed=src.subsample_seed)
    return h


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _hierarchy_note(run: Run, h: Hierarchy) -> None:
    run.extra["hierarchy_digest"] = h.digest()
    run.note(f"hierarchy: {h.node_count} nodes, {len(h.edges)} edges, max distance {h.max_distance}, "
             f"max |S| {h.max_relevant_size}")


def _stats_csv(h: Hierarchy):
    def fill(f):
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["distance", "relevant_pairs"])
        for d, n in enumerate(np.bincount(h.relevant_distances)):
            w.writerow([d, int(n)])
    return fill


def cmd_gen_tree(run: Run, h: Hierarchy) -> None:
    run.write_text("hierarchy.tsv", lambda f: write_edge_list(h, f))
    run.write_text("hierarchy_stats.csv", _stats_csv(h))


def cmd_ingest(run: Run, h: Hierarchy) -> None:
    cmd_gen_tree(run, h)


def cmd_construct(run: Run, h: Hierarchy) -> None:
    v = run.cfg.values
    seed = run.cfg.seed
    rows = []
    header = ["method", "trial", "dim", "epsilon", "min_match_score", "max_nonmatch_score",
              "threshold_r", "margin", "feasible", "expected_recall"]
    if v["method"] == "onehot":
        tables = [construct_onehot(h)]
        dim = h.node_count
    else:
        dim = v["dim"]
        if v["find_min_dim"]:
            dim = min_feasible_dimension(h, v["epsilon"], trials=v["trials"], seed=seed)
            run.note(f"smallest feasible dimension (majority of {v['trials']} trials): {dim}")
        tables = [construct_gaussian(h, dim, trial_seed(seed, dim, t)) for t in range(v["trials"])]
    feasible = 0
    for t, (q, x) in enumerate(tables):
        rep = check_separation(q, x, h, v["epsilon"])
        feasible += rep.feasible
        rec = expected_recall((q, x), h).overall_recall
        rows.append([v["method"], t, dim, v["epsilon"], _fmt(rep.min_match_score), _fmt(rep.max_nonmatch_score),
                     _fmt(rep.threshold_r), _fmt(rep.margin), str(rep.feasible).lower(), _fmt(rec)])

    def fill(f):
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)

    run.write_text("separation.csv", fill)
    if v["write_tables"]:
        run.write_binary("query_table.bin", tables[0][0].write)
        run.write_binary("doc_table.bin", tables[0][1].write)
    run.note(f"{v['method']} construction at dim {dim}: feasible in {feasible} of {len(tables)} trials")


def _train_one(run: Run, h: Hierarchy, phases, val: PairBatch, seed: int):
    v = run.cfg.values
    return train(h, v["dim"], phases, val, seed=seed, normalize=v["normalize"], init_std=v["init_std"])


def _report_note(run: Run, label: str, best: Checkpoint) -> None:
    r = best.validation_report
    slices = " ".join(f"d{d}={rec:.3f}" for d, (rec, _) in sorted(r.per_distance_recall.items()))
    run.note(f"{label}: best step {best.step} (phase {best.phase}) overall {r.overall_recall:.4f} "
             f"min {r.min_slice_recall:.4f} {slices}")


def cmd_train(run: Run, h: Hierarchy) -> None:
    cfg = run.cfg
    val = frozen_eval_pairs(h, cfg.values["eval_size"], cfg.seed)
    run.write_text("eval_pairs.tsv", lambda f: val.write(f, "regular", cfg.seed, h.digest()))
    best, history = _train_one(run, h, cfg.phases, val, cfg.seed)
    run.write_text("training_log.csv", lambda f: write_training_log(history, f, h.max_distance))
    meta = {"seed": cfg.seed, "config_hash": config_hash(cfg.phases, cfg.values),
            "hierarchy_digest": h.digest()}
    run.write_binary("checkpoint.bin", lambda f: best.write(f, meta))
    run.write_text("eval_report.csv", best.validation_report.to_csv)
    run.write_text("eval_report.json", best.validation_report.to_json)
    _report_note(run, "train", best)


def cmd_eval(run: Run, h: Hierarchy) -> None:
    v = run.cfg.values
    with open(v["checkpoint"], "rb") as f:
        ckpt, meta = Checkpoint.read(f)
    if meta.get("hierarchy_digest") not in (None, h.digest()):
        raise ValueError("checkpoint was trained on a different hierarchy")
    if v["pairs"] is not None:
        with open(v["pairs"]) as f:
            pairs = PairBatch.read(f)
    else:
        pairs = frozen_eval_pairs(h, v["eval_size"], run.cfg.seed)
    report = recall_at_relevant(ckpt.params, h, pairs, step=ckpt.step, seed=run.cfg.seed)
    report.phase = ckpt.phase
    run.write_text("eval_report.csv", report.to_csv)
    run.write_text("eval_report.json", report.to_json)
    if v["ks"]:
        def fill(f):
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["k", "recall"])
            for k in v["ks"]:
                w.writerow([k, _fmt(recall_at_k(ckpt.params, pairs, k))])
        run.write_text("recall_at_k.csv", fill)
    run.note(f"eval: overall {report.overall_recall:.4f} min slice {report.min_slice_recall:.4f}")


def cmd_sweep_dim(run: Run, h: Optional[Hierarchy]) -> None:
    cfg = run.cfg
    v = cfg.values
    if v["heights"] is not None:
        targets = [(H, build_perfect_tree(TreeSpec(H, v["width"]))) for H in v["heights"]]
    else:
        targets = [(None, h)]
    rows = []
    for H, tree in targets:
        val = frozen_eval_pairs(tree, v["eval_size"], cfg.seed)
        learned = dimension_sweep(tree, cfg.phases, v["dims"], v["threshold"], eval_pairs=val,
                                  seed=cfg.seed, normalize=v["normalize"])
        hand = None
        if v["handcrafted"]:
            hand = handcrafted_dimension(tree, v["threshold"], trials=v["handcrafted_trials"], seed=cfg.seed)
        rows.append(["" if H is None else H, "" if H is None else v["width"], tree.node_count,
                     "none" if learned is None else learned, "" if hand is None else hand])
        run.note(f"height {H}: {tree.node_count} nodes, learned dim {learned}, handcrafted dim {hand}")

    def fill(f):
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["height", "width", "nodes", "learned_dim", "handcrafted_dim"])
        w.writerows(rows)

    run.write_text("dim_sweep.csv", fill)


def _slice_header(h: Hierarchy) -> list[str]:
    return [f"recall_d{d}" for d in range(h.max_distance + 1)]


def _slice_values(h: Hierarchy, best: Checkpoint) -> list[str]:
    per = best.validation_report.per_distance_recall
    return [_fmt(per[d][0]) if d in per else "" for d in range(h.max_distance + 1)]


def cmd_sweep_p(run: Run, h: Hierarchy) -> None:
    cfg = run.cfg
    val = frozen_eval_pairs(h, cfg.values["eval_size"], cfg.seed)
    rows = []
    for p in cfg.values["ps"]:
        phases = [
            dataclasses.replace(ph, strategy=SamplingStrategy(SamplingKind.REBALANCED, p, ph.strategy.heavy))
            for ph in cfg.phases
        ]
        best, history = _train_one(run, h, phases, val, cfg.seed)
        run.write_text(f"sweep_p_{p:g}.csv", lambda f: write_training_log(history, f, h.max_distance))
        both = any(
            all(r.per_distance_recall.get(d, (0.0, 0))[0] > 0.9 for d in (0, h.max_distance)) for r in history
        )
        rows.append([f"{p:g}", best.step, _fmt(best.validation_report.overall_recall)]
                    + _slice_values(h, best) + [str(both).lower()])
        _report_note(run, f"p={p:g}", best)

    def fill(f):
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["p", "best_step", "overall_recall"] + _slice_header(h) + ["short_and_long_above_0.9"])
        w.writerows(rows)

    run.write_text("sweep_p.csv", fill)


def cmd_ablate(run: Run, h: Hierarchy) -> None:
    cfg = run.cfg
    if len(cfg.phases) != 2:
        raise ConfigError("train", "schedule", "ablate needs a two-phase pretrain/finetune schedule")
    pre, fine = cfg.phases
    val = frozen_eval_pairs(h, cfg.values["eval_size"], cfg.seed)
    rows = []
    for mult in cfg.values["lr_multipliers"]:
        for temp in cfg.values["temperatures"]:
            phases = [pre, dataclasses.replace(fine, learning_rate=pre.learning_rate * mult, temperature=temp)]
            best, _ = _train_one(run, h, phases, val, cfg.seed)
            rows.append([f"{mult:g}", f"{temp:g}", best.step, _fmt(best.validation_report.overall_recall),
                         _fmt(best.validation_report.min_slice_recall)] + _slice_values(h, best))
            _report_note(run, f"lr x{mult:g} T={temp:g}", best)

    def fill(f):
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["lr_multiplier", "temperature", "best_step", "overall_recall", "min_slice_recall"]
                   + _slice_header(h))
        w.writerows(rows)

    run.write_text("ablate.csv", fill)


HANDLERS = {
    "gen-tree": cmd_gen_tree,
    "ingest": cmd_ingest,
    "construct": cmd_construct,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-dim": cmd_sweep_dim,
    "sweep-p": cmd_sweep_p,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierdual", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hierdual {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH", help="INI experiment config")
        p.add_argument("--seed", type=int, metavar="N", help="root seed; overrides [run] seed")
        p.add_argument("--deterministic", action="store_true", help="record that reproducible output is required")
        p.add_argument("--out", metavar="DIR", default="hierdual-out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.seed is not None and args.seed < 0:
        print("config error: [run] seed: must be >= 0", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config, args.command, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    run = Run(args.out, cfg, args.deterministic)
    try:
        h = load_hierarchy(cfg.hierarchy) if cfg.hierarchy is not None else None
        if h is not None:
            _hierarchy_note(run, h)
        HANDLERS[args.command](run, h)
    except ConfigError as exc:
        run.finish("failed", str(exc))
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ArithmeticError, RuntimeError, ValueError, OSError, MemoryError) as exc:
        run.finish("failed", f"{type(exc).__name__}: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return 3
    run.finish("ok")
    print("\n".join(run.summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
