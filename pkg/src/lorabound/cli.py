"""Command-line pipeline: data generation through boundary export.

Exit codes: 0 on success, 1 for usage mistakes (bad flags, missing
arguments), 2 for domain failures (bad files, incompatible artifacts,
undetectable knees). Each artifact-producing command also writes a
timestamp-free manifest listing output hashes, so identical runs
produce identical trees.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .boundary import (BoundaryDecision, apply_boundary, coarse_then_fine_levels,
                       knee_from_report, sweep_boundary)
from .errors import InputError, LoraBoundError
from .fileio import (atomic_write_text, load_adapters, load_weights,
                     save_adapters, save_weights, write_manifest)
from .lora import check_compat, drop_above, init_adapters
from .metrics import METRIC_NAMES, corpus_score
from .model import generate_greedy, init_base
from .probe import default_drop_levels, probe_ground_truth, probe_under_drop, select_samples
from .reports import (read_probe_tsv, write_diff_tsv, write_drop_probe_tsv,
                      write_eval_tsv, write_probe_tsv, write_sweep_tsv)
from .runconfig import RunConfig
from .tasks import (GENERATORS, TASK_METRICS, gen_pretrain_corpus,
                    load_dataset, save_dataset)
from .train import finetune_lora, finetune_partial, pretrain
from .vocab import EOS_ID, decode

log = logging.getLogger("lorabound")


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 on usage errors; we reserve 2 for
    domain failures, so usage problems exit 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_config(path) -> RunConfig:
    if path is None:
        return RunConfig.default()
    return RunConfig.load(path)


def _load_split(data_dir: str, split: str):
    ds = load_dataset(data_dir)
    if split not in ds.splits:
        raise InputError(f"dataset has no split {split!r}")
    samples = ds.splits[split]
    if not samples:
        raise InputError(f"split {split!r} of {data_dir} is empty")
    return ds, samples


def _resolve_keep(value: str, n_layers: int, lset) -> int:
    """--keep-bottom accepts a plain integer or from:<decision.json>."""
    if value.startswith("from:"):
        path = value[len("from:"):]
        with open(path, encoding="utf-8") as f:
            decision = BoundaryDecision.from_dict(json.load(f))
        if lset is not None:
            apply_boundary(lset, decision)   # validates the set hash
        return decision.k_star
    try:
        k = int(value)
    except ValueError:
        raise InputError(
            f"--keep-bottom must be an integer or from:<path>, got {value!r}") from None
    if not 0 <= k <= n_layers:
        raise InputError(f"--keep-bottom {k} out of range 0..{n_layers}")
    return k


def _predictions(weights, adapters, samples, decode_budget: int) -> list[str]:
    preds = []
    for s in samples:
        out = generate_greedy(weights, adapters, s.prompt_ids,
                              max_new=decode_budget, stop_token=EOS_ID)
        preds.append(decode(out))
    return preds


def _manifest(out_path: str, command: str, params: dict, outputs: list[str]) -> None:
    write_manifest(out_path, command, params, outputs)


# -- commands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    task = args.task or cfg.task.name
    if task not in GENERATORS:
        raise InputError(f"unknown task {task!r}; expected one of {sorted(GENERATORS)}")
    seed = cfg.task.seed if args.seed is None else args.seed
    kwargs = {"sizes": cfg.task.sizes()}
    if task == "kvqa":
        kwargs.update(hops=cfg.task.hops, bridge_ratio=cfg.task.bridge_ratio)
    if task == "cipher-mt":
        kwargs["domain"] = args.domain or cfg.task.domain
    ds = GENERATORS[task](seed, **kwargs)
    paths = save_dataset(ds, args.out)
    _manifest(os.path.join(args.out, "manifest.json"), "gen-data",
              {"task": task, "seed": seed, "sizes": kwargs["sizes"],
               "domain": kwargs.get("domain", "in-domain")}, paths)
    counts = {s: len(v) for s, v in ds.splits.items()}
    print(f"gen-data: task={task} seed={seed} "
          + " ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args.config)
    corpus = gen_pretrain_corpus(cfg.pretrain.seed,
                                 n_tokens=cfg.pretrain.corpus_tokens,
                                 max_seq=cfg.model.max_seq)
    weights, history = pretrain(cfg.model, cfg.pretrain.train_config(), corpus,
                                log_path=args.log)
    save_weights(args.out, weights)
    outputs = [args.out] + ([args.log] if args.log else [])
    _manifest(args.out + ".manifest.json", "pretrain",
              {"config": cfg.to_dict()["pretrain"], "model": cfg.model.to_dict(),
               "fingerprint": weights.fingerprint()}, outputs)
    print(f"pretrain: {len(corpus)} sequences, final loss {history[-1][2]:.4f}, "
          f"fingerprint {weights.fingerprint()}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_config(args.config)
    base = load_weights(args.model)
    _, samples = _load_split(args.data, "train")
    adapters, history = finetune_lora(
        base, samples, cfg.train, targets=cfg.lora.targets,
        rank=cfg.lora.rank, alpha=cfg.lora.alpha, log_path=args.log)
    save_adapters(args.out, adapters)
    outputs = [args.out] + ([args.log] if args.log else [])
    _manifest(args.out + ".manifest.json", "finetune",
              {"model": base.fingerprint(), "data": os.path.abspath(args.data),
               "train": cfg.to_dict()["train"], "lora": cfg.to_dict()["lora"],
               "content_hash": adapters.content_hash()}, outputs)
    print(f"finetune: {len(samples)} samples, final loss {history[-1][2]:.4f}, "
          f"adapters {adapters.content_hash()}")
    return 0


def cmd_finetune_partial(args) -> int:
    cfg = _load_config(args.config)
    base = load_weights(args.model)
    _, samples = _load_split(args.data, "train")
    adapters, history = finetune_partial(
        base, samples, cfg.train, args.keep_bottom, targets=cfg.lora.targets,
        rank=cfg.lora.rank, alpha=cfg.lora.alpha, log_path=args.log)
    save_adapters(args.out, adapters)
    outputs = [args.out] + ([args.log] if args.log else [])
    _manifest(args.out + ".manifest.json", "finetune-partial",
              {"model": base.fingerprint(), "data": os.path.abspath(args.data),
               "keep_bottom": args.keep_bottom, "train": cfg.to_dict()["train"],
               "lora": cfg.to_dict()["lora"],
               "content_hash": adapters.content_hash()}, outputs)
    print(f"finetune-partial: layers 1..{args.keep_bottom}, "
          f"final loss {history[-1][2]:.4f}")
    return 0


def cmd_probe(args) -> int:
    cfg = _load_config(args.config)
    base = load_weights(args.model)
    _, samples = _load_split(args.data, args.split)
    adapters = None
    if args.adapters:
        adapters = load_adapters(args.adapters)
        check_compat(base, adapters)
        if args.keep_bottom is not None:
            adapters = drop_above(adapters, _resolve_keep(
                args.keep_bottom, base.cfg.n_layers, adapters))
    report = probe_ground_truth(base, adapters, samples,
                                n_tokens=cfg.probe.n_tokens,
                                budget=cfg.probe.sample_budget,
                                seed=cfg.probe.seed,
                                descriptor={"split": args.split})
    write_probe_tsv(args.out, report)
    _manifest(args.out + ".manifest.json", "probe",
              {"model": base.fingerprint(), "adapters": report.config["adapters"],
               "split": args.split, "probe": cfg.to_dict()["probe"]}, [args.out])
    mean_curve = report.mean_gt_by_layer()
    print(f"probe: {report.sample_count} samples, "
          f"top-layer mean reference prob {mean_curve[-1]:.4f}")
    return 0


def cmd_diff_probe(args) -> int:
    cfg = _load_config(args.config)
    base = load_weights(args.model)
    _, samples = _load_split(args.data, args.split)
    ours_set = load_adapters(args.adapters)
    check_compat(base, ours_set)
    baseline_set = None
    if args.baseline_adapters:
        baseline_set = load_adapters(args.baseline_adapters)
        check_compat(base, baseline_set)
    chosen = select_samples(samples, cfg.probe.sample_budget, cfg.probe.seed)
    kwargs = dict(n_tokens=cfg.probe.n_tokens, budget=len(chosen),
                  seed=cfg.probe.seed)
    ours = probe_ground_truth(base, ours_set, chosen, **kwargs)
    baseline = probe_ground_truth(base, baseline_set, chosen, **kwargs)
    from .probe import probe_difference
    diff = probe_difference(ours, baseline)
    meta = {"model": base.fingerprint(), "ours": ours.config["adapters"],
            "baseline": baseline.config["adapters"], "split": args.split,
            "sample_count": ours.sample_count, "n_tokens": ours.n_tokens}
    write_diff_tsv(args.out, diff, meta)
    _manifest(args.out + ".manifest.json", "diff-probe", meta, [args.out])
    print(f"diff-probe: max |delta| {abs(diff).max():.4f}")
    return 0


def cmd_knee(args) -> int:
    report = read_probe_tsv(args.probe)
    decision = knee_from_report(report, min_jump_ratio=args.min_jump_ratio,
                                fallback=args.fallback)
    atomic_write_text(args.out, json.dumps(decision.to_dict(), sort_keys=True,
                                           separators=(",", ":")) + "\n")
    _manifest(args.out + ".manifest.json", "knee",
              {"probe": os.path.abspath(args.probe),
               "min_jump_ratio": args.min_jump_ratio,
               "fallback": args.fallback}, [args.out])
    tag = " (fallback)" if decision.extra.get("fallback") else ""
    print(f"knee: boundary k* = {decision.k_star}{tag}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    base = load_weights(args.model)
    ds, samples = _load_split(args.data, args.split)
    full_set = load_adapters(args.adapters)
    check_compat(base, full_set)
    metric = args.metric or TASK_METRICS.get(ds.task, "em")
    keeps = cfg.sweep.keeps
    if keeps is None and args.coarse:
        keeps = coarse_then_fine_levels(base.cfg.n_layers, stride=args.coarse)
    decision = sweep_boundary(base, full_set, samples, metric, keeps=keeps,
                              budget=cfg.sweep.budget,
                              decode_budget=cfg.sweep.decode_budget,
                              seed=cfg.sweep.seed, refine=cfg.sweep.refine
                              or bool(args.coarse))
    atomic_write_text(args.out, json.dumps(decision.to_dict(), sort_keys=True,
                                           separators=(",", ":")) + "\n")
    outputs = [args.out]
    if args.tsv:
        write_sweep_tsv(args.tsv, decision)
        outputs.append(args.tsv)
    _manifest(args.out + ".manifest.json", "sweep",
              {"model": base.fingerprint(), "adapters": full_set.content_hash(),
               "metric": metric, "split": args.split,
               "sweep": cfg.to_dict()["sweep"]}, outputs)
    best = decision.per_k_scores[decision.k_star]
    print(f"sweep: k* = {decision.k_star} ({metric} {best:.4f} on "
          f"{decision.sample_count} samples)")
    return 0


def cmd_export(args) -> int:
    base = load_weights(args.model)
    full_set = load_adapters(args.adapters)
    check_compat(base, full_set)
    keep = _resolve_keep(args.keep_bottom, base.cfg.n_layers, full_set)
    kept = drop_above(full_set, keep)
    if args.format == "adapters":
        save_adapters(args.out, kept)
    else:
        from .lora import merge
        save_weights(args.out, merge(base, kept))
    _manifest(args.out + ".manifest.json", "export",
              {"model": base.fingerprint(), "adapters": full_set.content_hash(),
               "keep_bottom": keep, "format": args.format,
               "kept_params": kept.param_count(),
               "full_params": full_set.param_count()}, [args.out])
    print(f"export: kept layers 1..{keep}, {kept.param_count()} of "
          f"{full_set.param_count()} adapter params, format {args.format}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    base = load_weights(args.model)
    ds, samples = _load_split(args.data, args.split)
    adapters = None
    if args.adapters:
        adapters = load_adapters(args.adapters)
        check_compat(base, adapters)
        if args.keep_bottom is not None:
            adapters = drop_above(adapters, _resolve_keep(
                args.keep_bottom, base.cfg.n_layers, adapters))
    metric = args.metric or TASK_METRICS.get(ds.task, "em")
    chosen = select_samples(samples, args.budget or len(samples), cfg.sweep.seed)
    preds = _predictions(base, adapters, chosen, args.decode_budget)
    golds = [s.gold_text() for s in chosen]
    report = corpus_score(metric, preds, golds)
    meta = {"model": base.fingerprint(),
            "adapters": adapters.content_hash() if adapters else None,
            "task": ds.task, "split": args.split,
            "decode_budget": args.decode_budget}
    write_eval_tsv(args.out, report, preds, golds, meta)
    _manifest(args.out + ".manifest.json", "eval", meta, [args.out])
    print(f"eval: {metric} = {report.display_score:.4f} on "
          f"{report.sample_count} samples")
    return 0


def cmd_report(args) -> int:
    cfg = _load_config(args.config)
    base = load_weights(args.model)
    _, samples = _load_split(args.data, args.split)
    full_set = load_adapters(args.adapters)
    check_compat(base, full_set)
    os.makedirs(args.out_dir, exist_ok=True)
    outputs = []

    chosen = select_samples(samples, cfg.probe.sample_budget, cfg.probe.seed)
    n_layers = base.cfg.n_layers
    levels = cfg.probe.keep_levels
    if levels is None:
        levels = default_drop_levels(n_layers)
    levels = sorted(set([0] + list(levels) + [n_layers]))

    probed = probe_under_drop(base, full_set, chosen, keeps=levels,
                              n_tokens=cfg.probe.n_tokens, budget=len(chosen),
                              seed=cfg.probe.seed,
                              descriptor={"split": args.split})
    curves_path = os.path.join(args.out_dir, "layer_curves.tsv")
    write_drop_probe_tsv(curves_path, probed,
                         meta={"model": base.fingerprint(),
                               "adapters": full_set.content_hash(),
                               "split": args.split})
    outputs.append(curves_path)

    full_report = next(r for k, r in probed if k == n_layers)
    full_path = os.path.join(args.out_dir, "probe_full.tsv")
    write_probe_tsv(full_path, full_report)
    outputs.append(full_path)

    none_report = next(r for k, r in probed if k == 0)
    from .probe import probe_difference
    diff = probe_difference(full_report, none_report)
    diff_path = os.path.join(args.out_dir, "probe_diff.tsv")
    write_diff_tsv(diff_path, diff,
                   {"model": base.fingerprint(),
                    "ours": full_set.content_hash(), "baseline": None,
                    "split": args.split, "sample_count": full_report.sample_count,
                    "n_tokens": full_report.n_tokens})
    outputs.append(diff_path)

    if args.sweep_json:
        with open(args.sweep_json, encoding="utf-8") as f:
            decision = BoundaryDecision.from_dict(json.load(f))
        sweep_path = os.path.join(args.out_dir, "sweep_scores.tsv")
        write_sweep_tsv(sweep_path, decision)
        outputs.append(sweep_path)

    _manifest(os.path.join(args.out_dir, "manifest.json"), "report",
              {"model": base.fingerprint(), "adapters": full_set.content_hash(),
               "split": args.split, "levels": [int(k) for k, _ in probed]},
              outputs)
    print(f"report: wrote {len(outputs)} files to {args.out_dir}")
    return 0


def cmd_init_model(args) -> int:
    cfg = _load_config(args.config)
    weights = init_base(cfg.model, seed=args.seed)
    save_weights(args.out, weights)
    _manifest(args.out + ".manifest.json", "init-model",
              {"model": cfg.model.to_dict(), "seed": args.seed,
               "fingerprint": weights.fingerprint()}, [args.out])
    print(f"init-model: fingerprint {weights.fingerprint()}")
    return 0


# -- wiring ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lorabound",
                     description="Train, probe and truncate per-layer adapters.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, "generate a task dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--task", default=None)
    p.add_argument("--domain", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("init-model", cmd_init_model, "write untrained seeded weights")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("pretrain", cmd_pretrain, "pretrain base weights on the mixed corpus")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)

    p = add("finetune", cmd_finetune, "train adapters on every layer")
    p.add_argument("--config", default=None)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)

    p = add("finetune-partial", cmd_finetune_partial,
            "train adapters on the bottom K layers only")
    p.add_argument("--config", default=None)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--keep-bottom", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)

    p = add("probe", cmd_probe, "per-layer reference-probability curves")
    p.add_argument("--config", default=None)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--adapters", default=None)
    p.add_argument("--keep-bottom", default=None)
    p.add_argument("--split", default="validation",
                   choices=("train", "validation", "test"))
    p.add_argument("--out", required=True)

    p = add("diff-probe", cmd_diff_probe,
            "probe difference between two adapter states")
    p.add_argument("--config", default=None)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--adapters", required=True)
    p.add_argument("--baseline-adapters", default=None)
    p.add_argument("--split", default="validation",
                   choices=("train", "validation", "test"))
    p.add_argument("--out", required=True)

    p = add("knee", cmd_knee, "detect the boundary from a stored probe report")
    p.add_argument("--probe", required=True)
    p.add_argument("--min-jump-ratio", type=float, default=0.25)
    p.add_argument("--fallback", action="store_true",
                   help="fall back to the default depth when no knee is found")
    p.add_argument("--out", required=True)

    p = add("sweep", cmd_sweep, "pick the boundary by scoring every keep level")
    p.add_argument("--config", default=None)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--adapters", required=True)
    p.add_argument("--metric", default=None, choices=(None,) + METRIC_NAMES)
    p.add_argument("--split", default="validation",
                   choices=("train", "validation", "test"))
    p.add_argument("--coarse", type=int, default=0,
                   help="stride for a coarse grid refined around the winner")
    p.add_argument("--out", required=True)
    p.add_argument("--tsv", default=None)

    p = add("export", cmd_export, "drop adapters above the boundary and save")
    p.add_argument("--model", required=True)
    p.add_argument("--adapters", required=True)
    p.add_argument("--keep-bottom", required=True,
                   help="an integer or from:<decision.json>")
    p.add_argument("--format", default="merged", choices=("merged", "adapters"))
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "greedy-decode a split and score it")
    p.add_argument("--config", default=None)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--adapters", default=None)
    p.add_argument("--keep-bottom", default=None)
    p.add_argument("--metric", default=None, choices=(None,) + METRIC_NAMES)
    p.add_argument("--split", default="test",
                   choices=("train", "validation", "test"))
    p.add_argument("--budget", type=int, default=None,
                   help="evaluate at most this many samples")
    p.add_argument("--decode-budget", type=int, default=24)
    p.add_argument("--out", required=True)

    p = add("report", cmd_report, "emit the probe and sweep report bundle")
    p.add_argument("--config", default=None)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--adapters", required=True)
    p.add_argument("--split", default="validation",
                   choices=("train", "validation", "test"))
    p.add_argument("--sweep-json", default=None)
    p.add_argument("--out-dir", required=True)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except LoraBoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
