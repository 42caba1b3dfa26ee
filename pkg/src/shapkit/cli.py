"""Command-line frontend. Every command is deterministic under --seed and
writes byte-identical outputs on reruns with identical arguments."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, baselines, estimators, exact, explainer, metrics, surrogate, vit
from .dataset import (DatasetSplits, PlantedConfig, default_vit_config, generate,
                      hit_rate, load_dataset, save_dataset)
from .errors import ShapkitError, UsageError
from .estimators import KernelShapConfig
from .explainer import ExplainerTrainConfig
from .game import CoalitionalGame, ModelGame, load_tabular_json
from .tensorkit import RngState
from .vit import TrainSchedule, ViTWeights


def _load_json(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"{path}: cannot read JSON ({e})") from e
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return doc


def _write_json(path: str, payload) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def write_pgm(path: str, grid: np.ndarray) -> None:
    """ASCII PGM (P2) heatmap of a per-patch value grid, min-max scaled."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise UsageError("heatmap grid must be 2-dimensional")
    lo, hi = float(grid.min()), float(grid.max())
    pix = np.zeros_like(grid) if hi <= lo else (grid - lo) / (hi - lo)
    pix = np.rint(pix * 255).astype(int)
    lines = ["P2", f"{grid.shape[1]} {grid.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in pix]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_model(path: str) -> ViTWeights:
    weights, header = vit.load_vit_checkpoint(path)
    if header.get("kind") not in ("classifier", "surrogate"):
        raise UsageError(f"{path}: expected a classifier or surrogate checkpoint")
    return weights


def _dataset_example(data: DatasetSplits, split: str, index: int):
    part = data.split(split)
    if not 0 <= index < len(part):
        raise UsageError(f"index {index} outside the {split} split (size {len(part)})")
    return part.images[index], int(part.labels[index])


def _game_from_args(args) -> tuple[CoalitionalGame, int | None]:
    """Build the game; returns (game, label) where label is None for tables."""
    if getattr(args, "game", None):
        if getattr(args, "surrogate", None) or getattr(args, "data", None):
            raise UsageError("give either --game or --surrogate/--data, not both")
        return load_tabular_json(args.game), None
    if not getattr(args, "surrogate", None) or not getattr(args, "data", None):
        raise UsageError("need --game, or --surrogate with --data and --index")
    weights = _load_model(args.surrogate)
    data = load_dataset(args.data)
    image, label = _dataset_example(data, args.split, args.index)
    return ModelGame(weights, image, memoize=True), label


def _resolve_classes(spec: str, label: int | None, num_classes: int) -> list[int]:
    if spec == "all":
        return list(range(num_classes))
    if spec == "label":
        if label is None:
            raise UsageError("--class label needs a dataset example, not a game file")
        return [label]
    try:
        y = int(spec)
    except ValueError as e:
        raise UsageError(f"--class must be an integer, 'label', or 'all'; got {spec!r}") from e
    if not 0 <= y < num_classes:
        raise UsageError(f"class {y} outside 0..{num_classes - 1}")
    return [y]


# ---------------------------------------------------------------------------
# command handlers


def _cmd_gen_data(args) -> int:
    config = PlantedConfig.from_dict(_load_json(args.config)) if args.config else PlantedConfig()
    if args.seed is not None:
        config = PlantedConfig.from_dict({**config.to_dict(), "seed": args.seed})
    save_dataset(args.out, generate(config))
    print(f"wrote {args.out} (train={config.train_size}, val={config.val_size}, "
          f"test={config.test_size}, d={config.num_patches})")
    return 0


def _cmd_train_classifier(args) -> int:
    data = load_dataset(args.data)
    doc = _load_json(args.config) if args.config else {}
    config = default_vit_config(data.config, **doc.get("vit", {}))
    schedule = TrainSchedule(**doc.get("schedule", {"epochs": 10}))
    weights, history = vit.train_classifier(
        data.train.images, data.train.labels, data.val.images, data.val.labels,
        config, schedule, masking=args.masking, rng=RngState(args.seed))
    vit.save_vit_checkpoint(args.out, weights, "classifier", {"masking": args.masking})
    acc = history["val_accuracy"][-1] if history["val_accuracy"] else float("nan")
    print(f"wrote {args.out} (val_accuracy={acc:.4f})")
    return 0


def _cmd_finetune_surrogate(args) -> int:
    data = load_dataset(args.data)
    teacher = _load_model(args.classifier)
    doc = _load_json(args.config) if args.config else {}
    schedule = TrainSchedule(**doc.get("schedule", {"epochs": 10}))
    student, history = surrogate.finetune_surrogate(
        teacher, data.train.images, data.val.images, schedule, rng=RngState(args.seed))
    vit.save_vit_checkpoint(args.out, student, "surrogate")
    kl = history["val_kl"][-1] if history["val_kl"] else float("nan")
    print(f"wrote {args.out} (val_kl={kl:.6f})")
    return 0


def _cmd_train_explainer(args) -> int:
    data = load_dataset(args.data)
    surr = vit.load_vit_checkpoint(args.surrogate, expect_kind="surrogate")[0]
    doc = _load_json(args.config) if args.config else {}
    train_cfg = ExplainerTrainConfig(**doc.get("train", {"epochs": 10}))
    rng = RngState(args.seed)
    model = explainer.init_explainer(surr, rng.derive(0),
                                     init_from=doc.get("init_from", "surrogate"),
                                     use_tanh=bool(doc.get("use_tanh", True)))
    model, history = explainer.train_explainer(model, data.train.images,
                                               data.val.images, train_cfg, rng.derive(1))
    explainer.save_explainer(args.out, model)
    val = min(history["val_loss"]) if history["val_loss"] else history["initial_val_loss"]
    print(f"wrote {args.out} (best val_loss={val:.6g})")
    return 0


def _cmd_explain(args) -> int:
    model = explainer.load_explainer(args.explainer)
    data = load_dataset(args.data)
    image, label = _dataset_example(data, args.split, args.index)
    classes = _resolve_classes(args.class_spec, label, model.config.num_classes)
    phi = explainer.explain_all(model, image)[0]  # (d, K)
    full, null = explainer._grand_null_probs(model.surrogate, image[None])
    delta = (full - null)[0]
    atts = [exact.Attribution(phi[:, y], "explainer", class_index=y,
                              efficiency_gap=abs(float(phi[:, y].sum()) - float(delta[y])))
            for y in classes]
    exact.save_attributions(args.out, atts)
    if args.heatmap:
        if len(classes) != 1:
            raise UsageError("--heatmap needs a single class (an integer or 'label')")
        config = model.config
        write_pgm(args.heatmap, phi[:, classes[0]].reshape(config.grid_height,
                                                           config.grid_width))
    print(f"wrote {args.out} (classes={classes})")
    return 0


def _cmd_exact(args) -> int:
    game, label = _game_from_args(args)
    classes = _resolve_classes(args.class_spec, label, game.num_classes)
    atts = []
    for y in classes:
        if args.solver == "wls":
            atts.append(exact.shapley_wls(game, y))
        else:
            atts.append(exact.shapley_enumeration(game, y))
    exact.save_attributions(args.out, atts)
    print(f"wrote {args.out} (solver={args.solver}, classes={classes})")
    return 0


def _cmd_kernelshap(args) -> int:
    game, label = _game_from_args(args)
    classes = _resolve_classes(args.class_spec, label, game.num_classes)
    if len(classes) != 1:
        raise UsageError("kernelshap explains one class per run")
    config = KernelShapConfig(batch_size=args.batch, paired=args.paired,
                              threshold=args.threshold,
                              max_evaluations=args.max_evals, seed=args.seed)
    att, trace = estimators.kernelshap(game, classes[0], config)
    exact.save_attributions(args.out, [att])
    if args.trace:
        estimators.save_trace_csv(args.trace, trace)
    status = "converged" if trace.converged else "NOT converged"
    print(f"wrote {args.out} ({status} after {trace.evaluations} evaluations)")
    return 0


def _cmd_baselines(args) -> int:
    weights = _load_model(args.surrogate)
    data = load_dataset(args.data)
    image, label = _dataset_example(data, args.split, args.index)
    classes = _resolve_classes(args.class_spec, label, weights.config.num_classes)
    if len(classes) != 1:
        raise UsageError("baselines explain one class per run")
    y = classes[0]
    game = ModelGame(weights, image, memoize=True)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    rng = RngState(args.seed)
    atts: list[exact.Attribution] = []
    for method in methods:
        if method == "leave_one_out":
            atts.append(baselines.leave_one_out(game, y))
        elif method == "rise":
            atts.append(baselines.rise(game, y, samples=args.samples, rng=rng.derive(1)))
        elif method == "gradient":
            atts.append(baselines.vanilla_gradient(weights, image, y))
        elif method == "attention_last":
            atts.append(baselines.attention_last(weights, image))
        elif method == "random":
            atts.extend(baselines.random_ranking(game.d, rng=rng.derive(2),
                                                 repeats=args.repeats))
        else:
            raise UsageError(f"unknown baseline {method!r}; "
                             f"choose from {baselines.BASELINE_METHODS}")
    exact.save_attributions(args.out, atts)
    print(f"wrote {args.out} ({len(atts)} attributions)")
    return 0


def _attribution_for(method: str, game: CoalitionalGame, weights: ViTWeights,
                     model, image: np.ndarray, y: int, args,
                     rng: RngState) -> list[np.ndarray]:
    """Attribution value vectors (several for metric-averaged random)."""
    if method == "exact":
        return [exact.shapley_enumeration(game, y).values]
    if method == "kernelshap":
        config = KernelShapConfig(seed=0)
        return [estimators.kernelshap(game, y, config, rng=rng.derive(11))[0].values]
    if method == "explainer":
        if model is None:
            raise UsageError("method 'explainer' needs --explainer")
        return [explainer.explain(model, image, class_index=y)]
    if method == "leave_one_out":
        return [baselines.leave_one_out(game, y).values]
    if method == "rise":
        return [baselines.rise(game, y, samples=args.samples, rng=rng.derive(12)).values]
    if method == "gradient":
        return [baselines.vanilla_gradient(weights, image, y).values]
    if method == "attention_last":
        return [baselines.attention_last(weights, image).values]
    if method == "random":
        return [a.values for a in baselines.random_ranking(game.d, rng=rng.derive(13),
                                                           repeats=args.repeats)]
    raise UsageError(f"unknown method {method!r}")


def _cmd_evaluate(args) -> int:
    weights = _load_model(args.surrogate)
    data = load_dataset(args.data)
    part = data.split(args.split)
    limit = len(part) if args.limit is None else min(args.limit, len(part))
    if limit < 1:
        raise UsageError("no examples selected")
    model = explainer.load_explainer(args.explainer) if args.explainer else None
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    metric_names = [m.strip() for m in args.metrics.split(",") if m.strip()]
    known = {"insertion", "deletion", "sensitivity_n", "faithfulness", "hit_rate"}
    bad = set(metric_names) - known
    if bad:
        raise UsageError(f"unknown metrics {sorted(bad)}; choose from {sorted(known)}")
    rng = RngState(args.seed)
    per: dict[tuple[str, str], list[float]] = {}
    for i in range(limit):
        image = part.images[i]
        label = int(part.labels[i])
        game = ModelGame(weights, image, memoize=True)
        if args.class_mode == "label":
            y = label
        else:
            y = int(np.argmax(game.evaluate_matrix_all(np.ones((1, game.d), dtype=bool))[0]))
        ex_rng = rng.derive(i)
        for method in methods:
            vecs = _attribution_for(method, game, weights, model, image, y, args, ex_rng)
            for metric in metric_names:
                vals = []
                for v, vec in enumerate(vecs):
                    m_rng = ex_rng.derive(1000 + v)
                    if metric == "insertion":
                        vals.append(metrics.insertion_deletion(game, y, vec, "insertion").auc)
                    elif metric == "deletion":
                        vals.append(metrics.insertion_deletion(game, y, vec, "deletion").auc)
                    elif metric == "sensitivity_n":
                        r = metrics.sensitivity_n(game, y, vec, args.sens_n,
                                                  samples=args.metric_samples, rng=m_rng)
                        if r.defined:
                            vals.append(r.value)
                    elif metric == "faithfulness":
                        r = metrics.faithfulness_correlation(game, y, vec,
                                                             samples=args.metric_samples,
                                                             rng=m_rng)
                        if r.defined:
                            vals.append(r.value)
                    else:
                        vals.append(hit_rate(vec, part.signal[i], args.top_k))
                if vals:
                    per.setdefault((method, metric), []).append(float(np.mean(vals)))
    records = []
    for (method, metric), vals in sorted(per.items()):
        arr = np.asarray(vals)
        stderr = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
        records.append({"method": method, "metric": metric, "class_mode": args.class_mode,
                        "mean": float(arr.mean()), "stderr": stderr, "n": int(arr.size)})
    _write_json(args.out, {"records": records,
                           "config": {"split": args.split, "limit": limit,
                                      "class_mode": args.class_mode, "seed": args.seed}})
    print(f"wrote {args.out} ({len(records)} records over {limit} examples)")
    return 0


def _cmd_removal_curve(args) -> int:
    weights = _load_model(args.model)
    data = load_dataset(args.data)
    part = data.split(args.split)
    limit = len(part) if args.limit is None else min(args.limit, len(part))
    fractions = [float(tok) for tok in args.fractions.split(",") if tok.strip()]
    if not fractions:
        raise UsageError("no removal fractions given")
    donors = data.train.images if args.mode == "random_replace" else None
    points = surrogate.removal_curve(weights, part.images[:limit], part.labels[:limit],
                                     args.mode, fractions, rng=RngState(args.seed),
                                     donor_images=donors)
    surrogate.save_curve_csv(args.out, points)
    print(f"wrote {args.out} ({len(points)} fractions, mode={args.mode})")
    return 0


def _cmd_verify_theory(args) -> int:
    report: dict = {}
    ok = True

    worst = 0.0
    for d in range(args.d_min, args.d_max + 1):
        res = analysis.second_moment_matrix(d, "analytic")
        target = 0.5 * analysis.strong_convexity_mu(d)
        worst = max(worst, abs(res.lambda_min - target))
    sm_pass = worst <= 1e-12
    report["second_moment"] = {"d_range": [args.d_min, args.d_max],
                               "max_abs_error": worst, "pass": sm_pass}
    ok &= sm_pass

    if args.mc_samples > 0:
        mc = analysis.second_moment_matrix(args.mc_d, "monte_carlo",
                                           samples=args.mc_samples,
                                           rng=RngState(args.seed))
        ana = analysis.second_moment_matrix(args.mc_d, "analytic")
        # binomial-style bound on the entry standard error at n draws
        se = 3.0 * 0.5 / np.sqrt(args.mc_samples)
        mc_pass = bool(np.abs(mc.matrix - ana.matrix).max() <= se)
        report["second_moment"]["mc"] = {
            "d": args.mc_d, "samples": args.mc_samples,
            "max_entry_error": float(np.abs(mc.matrix - ana.matrix).max()),
            "allowance": float(se), "pass": mc_pass}
        ok &= mc_pass

    if args.explainer:
        if not args.data:
            raise UsageError("--explainer verification needs --data")
        model = explainer.load_explainer(args.explainer)
        data = load_dataset(args.data)
        part = data.split(args.split)
        limit = min(args.inputs, len(part))
        rep = analysis.empirical_sve(model, part.images[:limit],
                                     tuples_per_input=args.tuples,
                                     rng=RngState(args.seed))
        report["error_bound"] = analysis.report_to_json(rep)
        ok &= rep.passed

    report["pass"] = bool(ok)
    analysis.save_report(args.out, report)
    print(f"wrote {args.out} (pass={bool(ok)})")
    return 0 if ok else 3


# ---------------------------------------------------------------------------
# parser


def _add_game_source(p: argparse.ArgumentParser) -> None:
    p.add_argument("--game", help="tabular game JSON file")
    p.add_argument("--surrogate", help="surrogate/classifier checkpoint (SHPK1)")
    p.add_argument("--data", help="dataset file (SHPD1)")
    p.add_argument("--index", type=int, default=0, help="example index in the split")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shapkit",
        description="Shapley-value explanations for masked patch transformers")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a planted-signal dataset")
    p.add_argument("--config", help="PlantedConfig JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train-classifier", help="train a patch transformer")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="JSON with 'vit' and 'schedule' sections")
    p.add_argument("--masking", default="none", choices=["none", "random"])
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_train_classifier)

    p = sub.add_parser("finetune-surrogate",
                       help="distill a classifier for partial inputs")
    p.add_argument("--data", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--config", help="JSON with a 'schedule' section")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_finetune_surrogate)

    p = sub.add_parser("train-explainer", help="train the amortized explainer")
    p.add_argument("--data", required=True)
    p.add_argument("--surrogate", required=True)
    p.add_argument("--config", help="JSON with 'train', 'init_from', 'use_tanh'")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_train_explainer)

    p = sub.add_parser("explain", help="one forward pass of the explainer")
    p.add_argument("--explainer", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--class", dest="class_spec", default="label",
                   help="class index, 'label', or 'all'")
    p.add_argument("--out", required=True)
    p.add_argument("--heatmap", help="write a P2 PGM patch heatmap")
    p.set_defaults(fn=_cmd_explain)

    p = sub.add_parser("exact", help="exact Shapley values")
    _add_game_source(p)
    p.add_argument("--class", dest="class_spec", default="0")
    p.add_argument("--solver", default="enumeration", choices=["enumeration", "wls"])
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_exact)

    p = sub.add_parser("kernelshap", help="sampled Shapley with convergence detection")
    _add_game_source(p)
    p.add_argument("--class", dest="class_spec", default="0")
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--paired", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--max-evals", type=int, default=1 << 17)
    p.add_argument("--trace", help="write a per-checkpoint CSV trace")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_kernelshap)

    p = sub.add_parser("baselines", help="reference attribution methods")
    p.add_argument("--surrogate", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--class", dest="class_spec", default="label")
    p.add_argument("--methods", default=",".join(baselines.BASELINE_METHODS))
    p.add_argument("--samples", type=int, default=2000, help="rise sample count")
    p.add_argument("--repeats", type=int, default=10, help="random-ranking repeats")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_baselines)

    p = sub.add_parser("evaluate", help="attribution quality metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--surrogate", required=True)
    p.add_argument("--explainer")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--methods", default="explainer,leave_one_out,random")
    p.add_argument("--metrics", default="insertion,deletion,faithfulness,hit_rate")
    p.add_argument("--class-mode", default="label", choices=["label", "argmax"])
    p.add_argument("--sens-n", type=int, default=4)
    p.add_argument("--metric-samples", type=int, default=300)
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--samples", type=int, default=2000, help="rise sample count")
    p.add_argument("--repeats", type=int, default=10, help="random-ranking repeats")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("removal-curve", help="prediction drift under patch removal")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--mode", default="pre_softmax", choices=list(surrogate.REMOVAL_MODES))
    p.add_argument("--fractions", default="0.0,0.25,0.5,0.75,1.0")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_removal_curve)

    p = sub.add_parser("verify-theory", help="check the convexity and bound claims")
    p.add_argument("--d-min", type=int, default=2)
    p.add_argument("--d-max", type=int, default=50)
    p.add_argument("--mc-d", type=int, default=6)
    p.add_argument("--mc-samples", type=int, default=0,
                   help="Monte Carlo draws for the second-moment check (0 = skip)")
    p.add_argument("--explainer", help="also check the error bound on a checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--inputs", type=int, default=100)
    p.add_argument("--tuples", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_verify_theory)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ShapkitError as e:
        print(f"error: {e}", file=sys.stderr)
        return getattr(e, "exit_code", 3)


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
