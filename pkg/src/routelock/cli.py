"""Operator surface: subcommands wiring the modules into runnable experiments.

Subcommands: train, generate, theory, eval, filter, gradcheck. One JSON
config document drives a run; command-line flags override config fields
(flag > config > built-in default). Seeds are mandatory everywhere, and
every command echoes its fully resolved configuration and seed into its
output directory, so greedy-path artifacts reproduce bitwise.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DataError
from .leakage import (
    LeakageReport,
    ReflectiveLexicon,
    FilterVerdict,
    evaluate,
    filter_no_think_candidates,
    leakage_delta_table,
    reports_to_csv,
    write_filter_audit,
)
from .model import DenseModel, ModelConfig, ModelParams, generate
from .params import value_and_grad
from .tensor import Tensor, no_grad
from .theory import (
    conflict_gap,
    dense_optimum,
    equal_curvature_gap,
    fixed_backbone_dominance,
    hessian_block_audit,
    linearization_residual,
    random_expert_direction,
    random_quadratic_pair,
    verify_interference_on_quadratic,
)
from .tokenizer import BOS_ID, Route, UNK_ID, Vocabulary, control_token_id, decode, encode
from .trainer import (
    TrainConfig,
    batch_loss_fn,
    load_dataset_jsonl,
    dataset_texts,
    make_batch,
    mode_loss_grad,
    split_by_mode,
    train,
)
from .synth import SynthTaskSpec, generate_synth_dataset


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def _digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode())
    return h.hexdigest()[:12]


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _resolve_seed(args, config: dict) -> int:
    seed = args.seed if args.seed is not None else config.get("seed")
    if seed is None:
        raise ValueError("a seed is required (flag --seed or config field \"seed\")")
    return int(seed)


def _out_dir(args, config: dict, default: str) -> Path:
    out = Path(args.out or config.get("report_dir") or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out: Path, name: str, resolved: dict) -> None:
    path = out / f"{name}_config.json"
    path.write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    print(f"resolved config -> {path}")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    config = _load_config(args.config)
    seed = _resolve_seed(args, config)
    dataset_path = args.dataset or config.get("dataset")
    if not dataset_path:
        return _fail("train needs a dataset (flag --dataset or config field)")
    out = _out_dir(args, config, "runs/train")

    vocab = Vocabulary.from_texts(dataset_texts(dataset_path))
    model_cfg_dict = dict(config.get("model", {}))
    model_cfg_dict.setdefault("vocab_size", len(vocab))
    model_cfg_dict.setdefault("d_model", 64)
    model_cfg_dict.setdefault("n_layers", 2)
    model_cfg_dict.setdefault("n_heads", 4)
    model_cfg_dict.setdefault("d_ff", 128)
    model_cfg_dict.setdefault("max_seq", 64)
    cfg = ModelConfig.from_dict(model_cfg_dict)

    train_cfg_dict = dict(config.get("train", {}))
    train_cfg_dict["seed"] = seed
    train_cfg = TrainConfig(**train_cfg_dict)

    try:
        dataset, _ = load_dataset_jsonl(dataset_path, vocab)
    except DataError as exc:
        return _fail(str(exc))

    dense = DenseModel.init_random(cfg, seed=seed)
    model = ModelParams.clone_from_dense(dense)

    def on_epoch(epoch: int, l0: float, l1: float) -> None:
        print(f"epoch {epoch}: no_think loss {l0:.6f}  think loss {l1:.6f}")

    try:
        trained, log = train(model, dataset, train_cfg, epoch_callback=on_epoch)
    except DataError as exc:
        return _fail(str(exc))

    ckpt_path = Path(args.checkpoint or config.get("checkpoint") or out / "model.ple")
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(trained, ckpt_path)
    vocab_path = ckpt_path.with_suffix(".vocab.txt")
    vocab.save(vocab_path)
    log_path = out / "trajectory.csv"
    log.to_csv(log_path)
    _echo_config(
        out,
        "train",
        {
            "seed": seed,
            "dataset": str(dataset_path),
            "checkpoint": str(ckpt_path),
            "vocab": str(vocab_path),
            "model": cfg.to_dict(),
            "train": train_cfg.to_dict(),
        },
    )
    print(f"checkpoint -> {ckpt_path}")
    print(f"vocabulary -> {vocab_path}")
    print(f"trajectory -> {log_path}")
    return 0


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    config = _load_config(args.config)
    checkpoint = args.checkpoint or config.get("checkpoint")
    if not checkpoint:
        return _fail("generate needs a checkpoint (flag --checkpoint or config field)")
    model = load_checkpoint(checkpoint)
    vocab_path = args.vocab or str(Path(checkpoint).with_suffix(".vocab.txt"))
    vocab = Vocabulary.load(vocab_path)
    prompt_ids = encode(args.prompt, vocab)
    if UNK_ID in prompt_ids:
        unknown = [tok for tok in args.prompt.split() if tok not in vocab]
        print(f"warning: unknown tokens mapped to <unk>: {unknown}", file=sys.stderr)
    sampler = "temperature" if args.temp is not None else "greedy"
    seed = args.seed if args.seed is not None else config.get("seed")
    print(
        f"resolved: checkpoint={checkpoint} sampler={sampler} max_new={args.max_new} seed={seed}",
        file=sys.stderr,
    )
    completion, route = generate(
        model,
        prompt_ids,
        max_new=args.max_new,
        sampler=sampler,
        temperature=args.temp if args.temp is not None else 1.0,
        seed=seed,
    )
    print(decode(completion, vocab))
    print(f"route={int(route)}")
    return 0


# ---------------------------------------------------------------------------
# theory
# ---------------------------------------------------------------------------

THEORY_CHECKS = (
    "stationarity",
    "conflict-gap",
    "equal-curvature",
    "dominance",
    "interference",
    "decoupling",
    "hessian",
    "linearization",
)


def _tiny_audit_setup(seed: int):
    spec = SynthTaskSpec(modulus=5, n_problems=6, seed=seed)
    data, vocab = generate_synth_dataset(spec)
    cfg = ModelConfig(vocab_size=len(vocab), d_model=8, n_layers=2, n_heads=2, d_ff=12, max_seq=24)
    model = ModelParams.clone_from_dense(DenseModel.init_random(cfg, seed))
    d0, d1 = split_by_mode(data)
    return model, d0, d1


def _theory_records(check: str, instances: int, seed: int, inject_error: bool):
    """Yield {check, inputs_digest, measured, threshold, pass} per instance."""
    dim = 8
    if check in ("stationarity", "conflict-gap", "equal-curvature", "dominance", "interference"):
        for i in range(instances):
            m0, m1 = random_quadratic_pair(
                dim, seed + i, equal_curvature=(check == "equal-curvature")
            )
            if check == "stationarity":
                bd = dense_optimum(m0, m1)
                g = m0.pi * m0.grad(bd) + m1.pi * m1.grad(bd)
                measured, threshold = float(np.linalg.norm(g)), 1e-10
                ok = measured <= threshold
            elif check == "conflict-gap":
                gap = conflict_gap(m0, m1)
                split, dense, _ = fixed_backbone_dominance(m0, m1)
                measured = max(abs(gap - (dense - split)), -min(gap, 0.0))
                threshold = 1e-10
                ok = measured <= threshold
            elif check == "equal-curvature":
                gap = conflict_gap(m0, m1)
                closed = equal_curvature_gap(m0.H, m0.beta_star, m1.beta_star, m0.pi)
                measured, threshold = abs(gap - closed), 1e-10
                ok = measured <= threshold
            elif check == "dominance":
                split, dense, ok = fixed_backbone_dominance(m0, m1)
                measured, threshold = split - dense, 1e-12
                ok = measured <= threshold
            else:  # interference
                rng = np.random.default_rng(seed + 1000 + i)
                beta = rng.normal(size=dim)
                rep = verify_interference_on_quadratic(m0, m1, beta, eta=1e-4)
                ok = rep.sign_consistent and (
                    rep.split_change <= rep.split_second_order + 1e-15
                )
                measured, threshold = rep.dense_change - rep.first_order, rep.second_order_bound
            if inject_error:
                ok = False
            yield {
                "check": check,
                "inputs_digest": _digest(check, seed, i),
                "measured": float(measured),
                "threshold": float(threshold),
                "pass": bool(ok),
            }
        return

    model, d0, d1 = _tiny_audit_setup(seed)
    if check == "decoupling":
        _, grads = mode_loss_grad(model, d0[: min(4, len(d0))])
        worst = max(
            float(np.max(np.abs(grads[n]))) for n in grads.names if ".expert1." in n
        )
        if inject_error:
            worst += 1.0
        yield {
            "check": check,
            "inputs_digest": _digest(check, seed),
            "measured": worst,
            "threshold": 0.0,
            "pass": worst <= 0.0,
        }
    elif check == "hessian":
        rep = hessian_block_audit(model, d0[:4], d1[:4], probes=16, seed=seed)
        measured = rep.cross_beta0_beta1 + (1.0 if inject_error else 0.0)
        ok = measured <= 1e-6 and rep.beta0_beta0 > 1e-4 and rep.alpha_beta0 > 1e-4
        yield {
            "check": check,
            "inputs_digest": _digest(check, seed),
            "measured": measured,
            "threshold": 1e-6,
            "pass": ok,
        }
    else:  # linearization
        direction = random_expert_direction(model, model.config.n_layers - 1, seed)
        tokens = list(d0[0].tokens)
        rows = linearization_residual(model, tokens, direction, [1e-1, 5e-2, 2.5e-2])
        ratios = [
            rows[i + 1].rel_residual / rows[i].rel_residual
            for i in range(len(rows) - 1)
            if rows[i].rel_residual > 0
        ]
        measured = max(ratios) if ratios else 0.0
        if inject_error:
            measured += 1.0
        yield {
            "check": check,
            "inputs_digest": _digest(check, seed),
            "measured": measured,
            "threshold": 0.6,
            "pass": measured <= 0.6,
        }


def cmd_theory(args) -> int:
    config = _load_config(args.config)
    seed = _resolve_seed(args, config)
    out = _out_dir(args, config, "runs/theory")
    checks = args.checks.split(",") if args.checks else list(THEORY_CHECKS)
    for c in checks:
        if c not in THEORY_CHECKS:
            return _fail(f"unknown check {c!r}; available: {', '.join(THEORY_CHECKS)}")
    _echo_config(out, "theory", {"seed": seed, "checks": checks, "instances": args.instances})

    all_ok = True
    print(f"{'check':<18}{'records':>8}{'worst measured':>18}{'pass':>7}")
    for check in checks:
        records = list(_theory_records(check, args.instances, seed, args.inject_error))
        path = out / f"theory_{check}.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        ok = all(r["pass"] for r in records)
        worst = max(r["measured"] for r in records)
        all_ok &= ok
        print(f"{check:<18}{len(records):>8}{worst:>18.3e}{str(ok):>7}")
    if not all_ok:
        print("FAILED checks present", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _eval_prompts_from_file(path, vocab: Vocabulary, mode: Route):
    """(prompt ids, gold) pairs; prompts get BOS and the requested control token."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if "answer" not in record:
                raise DataError(f"{path}:{lineno}: eval records need an \"answer\" field")
            if record.get("mode") is not None and record["mode"] != ("think" if mode else "no_think"):
                continue
            ids = [BOS_ID] + encode(record["prompt"], vocab) + [control_token_id(mode)]
            out.append((ids, str(record["answer"])))
    return out


def cmd_eval(args) -> int:
    config = _load_config(args.config)
    seed = _resolve_seed(args, config)
    out = _out_dir(args, config, "runs/eval")
    model = load_checkpoint(args.checkpoint)
    vocab_path = args.vocab or str(Path(args.checkpoint).with_suffix(".vocab.txt"))
    vocab = Vocabulary.load(vocab_path)
    lexicon_path = args.lexicon or config.get("lexicon")
    lexicon = ReflectiveLexicon.load(lexicon_path) if lexicon_path else ReflectiveLexicon()

    modes = {
        "both": [Route.NO_THINK, Route.THINK],
        "no_think": [Route.NO_THINK],
        "think": [Route.THINK],
    }[args.mode]

    reports: dict[tuple[str, str], LeakageReport] = {}
    for mode in modes:
        try:
            prompts = _eval_prompts_from_file(args.dataset, vocab, mode)
        except DataError as exc:
            return _fail(str(exc))
        rep = evaluate(model, prompts, mode, vocab, lexicon, max_new=args.max_new, seed=seed)
        name = "think" if mode is Route.THINK else "no_think"
        reports[("model", name)] = rep
        print(
            f"mode {name}: accuracy {rep.accuracy:.4f}  mean length {rep.mean_length:.2f}  "
            f"refl/answer {rep.refl_per_answer:.4f}  ({rep.n_prompts} prompts, {rep.n_skipped} skipped)"
        )

    csv_text = reports_to_csv(reports)
    (out / "leakage_report.csv").write_text(csv_text)
    (out / "leakage_report.json").write_text(
        json.dumps(
            {f"{k[0]}/{k[1]}": v.as_dict() for k, v in reports.items()}, indent=2, sort_keys=True
        )
        + "\n"
    )
    if args.baseline:
        with open(args.baseline, encoding="utf-8") as fh:
            base = json.load(fh)
        for key, rec in base.items():
            model_name, mode_name = key.split("/")
            reports[(model_name, mode_name)] = LeakageReport(**rec)
        first = next(iter(base))
        csv_delta, table = leakage_delta_table(reports, tuple(first.split("/")))
        (out / "leakage_delta.csv").write_text(csv_delta)
        print(table)
    _echo_config(
        out,
        "eval",
        {"seed": seed, "checkpoint": args.checkpoint, "dataset": args.dataset, "mode": args.mode,
         "max_new": args.max_new},
    )
    return 0


# ---------------------------------------------------------------------------
# filter
# ---------------------------------------------------------------------------


def cmd_filter(args) -> int:
    config = _load_config(args.config)
    out = _out_dir(args, config, "runs/filter")
    lexicon_path = args.lexicon or config.get("lexicon")
    lexicon = ReflectiveLexicon.load(lexicon_path) if lexicon_path else ReflectiveLexicon()
    candidates = []
    try:
        with open(args.candidates, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    candidates.append((rec["prompt"], rec["response"]))
                except (json.JSONDecodeError, KeyError) as exc:
                    return _fail(f"{args.candidates}:{lineno}: {exc}")
        with open(args.gold, encoding="utf-8") as fh:
            golds = [line.strip() for line in fh if line.strip()]
    except OSError as exc:
        return _fail(str(exc))
    if len(golds) != len(candidates):
        return _fail(f"{len(candidates)} candidates but {len(golds)} gold answers")

    triples = [(p, r, g) for (p, r), g in zip(candidates, golds)]
    kept, rejected = filter_no_think_candidates(triples, args.max_len, lexicon)

    kept_path = out / "kept.jsonl"
    with open(kept_path, "w", encoding="utf-8") as fh:
        for prompt, response, gold in kept:
            fh.write(
                json.dumps(
                    {"prompt": prompt, "target": response, "mode": "no_think", "answer": gold},
                    sort_keys=True,
                )
                + "\n"
            )
    verdicts = []
    rejected_by_index = {i: reason for i, _, reason in rejected}
    for i, triple in enumerate(triples):
        if i in rejected_by_index:
            verdicts.append(FilterVerdict(i, False, rejected_by_index[i]))
        else:
            verdicts.append(FilterVerdict(i, True, None))
    audit_path = out / "filter_audit.jsonl"
    write_filter_audit(audit_path, verdicts)
    _echo_config(
        out,
        "filter",
        {
            "candidates": args.candidates,
            "gold": args.gold,
            "max_len": args.max_len,
            "lexicon": lexicon_path,
            "seed": args.seed,
        },
    )
    print(f"kept {len(kept)} of {len(triples)} -> {kept_path}")
    print(f"audit -> {audit_path}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    if args.probes < 1:
        return _fail("--probes must be >= 1")
    config = _load_config(args.config)
    seed = _resolve_seed(args, config)
    out = _out_dir(args, config, "runs/gradcheck")

    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        spec = SynthTaskSpec(modulus=5, n_problems=4, seed=seed)
        data, _ = generate_synth_dataset(spec)
    else:
        model, d0, d1 = _tiny_audit_setup(seed)
        data = d0 + d1
    d0, d1 = split_by_mode(data)

    results = {}

    # reverse-mode vs central differences on sampled coordinates
    batch = make_batch(d0[:4])
    loss_fn = batch_loss_fn(model, Route.NO_THINK, "example_mean")
    _, grads = value_and_grad(loss_fn, model.params, batch)
    if args.inject_error:
        grads = grads.from_flat(grads.flatten() + 1e-2)
    flat_g = grads.flatten()
    flat_p = model.params.flatten()
    rng = np.random.default_rng(seed)
    coords = rng.choice(flat_p.size, size=min(args.probes, flat_p.size), replace=False)
    step = 1e-5
    worst = 0.0
    for i in coords:
        f = flat_p.copy()
        f[i] += step
        with no_grad():
            lp = float(loss_fn({n: Tensor(a) for n, a in model.params.from_flat(f).items()}, batch).data)
        f[i] -= 2 * step
        with no_grad():
            lm = float(loss_fn({n: Tensor(a) for n, a in model.params.from_flat(f).items()}, batch).data)
        fd = (lp - lm) / (2 * step)
        rel = abs(flat_g[i] - fd) / max(abs(flat_g[i]), abs(fd), 1e-4)
        worst = max(worst, rel)
    results["grad_vs_fd_max_rel"] = (worst, 1e-5, worst <= 1e-5)

    # inactive-expert zero
    _, g0 = mode_loss_grad(model, d0[:4])
    worst_inactive = max(float(np.max(np.abs(g0[n]))) for n in g0.names if ".expert1." in n)
    if args.inject_error:
        worst_inactive += 1.0
    results["inactive_expert_max_abs"] = (worst_inactive, 0.0, worst_inactive <= 0.0)

    # cross-expert curvature probes
    rep = hessian_block_audit(model, d0[:3], d1[:3], probes=min(args.probes, 32), seed=seed)
    results["hessian_cross_max_abs"] = (rep.cross_beta0_beta1, 1e-6, rep.cross_beta0_beta1 <= 1e-6)

    all_ok = True
    report = {}
    for name, (measured, threshold, ok) in results.items():
        ok = bool(ok)
        all_ok &= ok
        report[name] = {"measured": float(measured), "threshold": float(threshold), "pass": ok}
        print(f"{name:<28}{measured:>14.3e}  (<= {threshold:g})  {'PASS' if ok else 'FAIL'}")
    (out / "gradcheck.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _echo_config(out, "gradcheck", {"seed": seed, "probes": args.probes,
                                    "checkpoint": args.checkpoint})
    return 0 if all_ok else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="routelock",
        description="Route-locked dual-expert decoder: training, generation, theory checks, leakage eval.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override its fields")
        p.add_argument("--seed", type=int, help="seed (mandatory here or in the config)")
        p.add_argument("--out", help="output directory for artifacts")

    p = sub.add_parser("train", help="train a cloned dual-expert model on a JSONL dataset")
    common(p)
    p.add_argument("--dataset", help="line-delimited JSON dataset")
    p.add_argument("--checkpoint", help="output checkpoint path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="decode a completion from a checkpoint")
    p.add_argument("--config", help="JSON config file; flags override its fields")
    p.add_argument("--checkpoint")
    p.add_argument("--vocab", help="vocabulary file (default: <checkpoint>.vocab.txt)")
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new", type=int, default=32)
    p.add_argument("--temp", type=float, help="temperature sampling (default greedy)")
    p.add_argument("--seed", type=int, help="required for temperature sampling")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("theory", help="run the quadratic-surrogate and curvature checks")
    common(p)
    p.add_argument("--checks", help=f"comma list from: {', '.join(THEORY_CHECKS)}")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--inject-error", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_theory)

    p = sub.add_parser("eval", help="leakage report for a checkpoint on an eval set")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab")
    p.add_argument("--dataset", required=True, help="JSONL with prompt/answer records")
    p.add_argument("--mode", choices=["both", "think", "no_think"], default="both")
    p.add_argument("--max-new", type=int, default=32)
    p.add_argument("--lexicon", help="marker list, one per line")
    p.add_argument("--baseline", help="prior leakage_report.json to diff against")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("filter", help="apply the correctness/length/style filters")
    common(p)
    p.add_argument("--candidates", required=True, help="JSONL with prompt/response records")
    p.add_argument("--gold", required=True, help="one gold answer per line")
    p.add_argument("--max-len", type=int, default=8)
    p.add_argument("--lexicon")
    p.set_defaults(fn=cmd_filter)

    p = sub.add_parser("gradcheck", help="gradient, decoupling, and curvature audits")
    common(p)
    p.add_argument("--checkpoint", help="audit this checkpoint instead of a fresh tiny model")
    p.add_argument("--probes", type=int, default=64)
    p.add_argument("--inject-error", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
