"""Command-line interface.

Subcommands:
  train            run an experiment from a config file (optionally the plain
                   cross-entropy baseline, optionally several seeds in
                   parallel worker threads capped by EMLC_THREADS)
  verify-gradients run the meta-gradient oracle suite and print a table
  inject-noise     corrupt a CSV dataset and write the noisy CSV
  report           summarize a metrics.csv as JSON

Exit codes: 0 success, 1 failed verification or run error, 2 bad arguments.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import bilevel, data, harness, models
from .harness import ConfigError


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="emlc")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training experiment")
    t.add_argument("--config", required=True, help="flat key = value config file")
    t.add_argument("--seed", type=int, default=None, help="override config seed")
    t.add_argument("--seeds", default=None, help="comma list; runs per-seed subdirs")
    t.add_argument("--out-dir", default=None, help="override config out_dir")
    t.add_argument(
        "--baseline", action="store_true",
        help="train the plain cross-entropy baseline instead",
    )

    v = sub.add_parser("verify-gradients", help="run the meta-gradient oracle suite")
    v.add_argument("--size", choices=["tiny", "small"], default="tiny")
    v.add_argument("--seeds", type=int, default=5, help="seeds per check")

    i = sub.add_parser("inject-noise", help="corrupt a CSV dataset")
    i.add_argument("--input", required=True)
    i.add_argument("--output", required=True)
    i.add_argument("--kind", choices=["symmetric", "asymmetric"], required=True)
    i.add_argument("--rate", type=float, required=True)
    i.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("report", help="summarize a metrics.csv")
    r.add_argument("--metrics", required=True)
    r.add_argument("--json-out", default=None, help="write summary here too")
    return p


# ---------------------------------------------------------------------------
# verify-gradients
# ---------------------------------------------------------------------------

_SIZES = {
    "tiny": dict(student_hidden=(8,), feature_dim=8, embed=8, gate=8,
                 samples=40, batch=8),
    "small": dict(student_hidden=(16, 8), feature_dim=12, embed=12, gate=16,
                  samples=80, batch=16),
}


def _verify_problem(size: str, seed: int):
    dims = _SIZES[size]
    sspec = models.StudentSpec(2, dims["student_hidden"], 4)
    tspec = models.TeacherSpec(
        2, (), dims["feature_dim"], 4,
        embed_dim=dims["embed"], gate_hidden=dims["gate"],
    )
    rng = np.random.default_rng(seed)
    examples = data.gen_blobs(4, 2, dims["samples"] // 4, 0.6, seed)
    noisy = data.NoisyDataset.from_examples(data.inject_symmetric(examples, 0.5, seed + 1))
    clean_x = rng.normal(scale=2.0, size=(16, 2))
    clean_y = rng.integers(0, 4, 16)
    problem = bilevel.EMLCProblem(
        sspec, tspec, noisy.x, noisy.noisy_labels, clean_x, clean_y
    )
    return problem, sspec, tspec, dims


def run_gradient_checks(size: str = "tiny", n_seeds: int = 5) -> list[tuple[str, float, float, bool]]:
    """Returns rows of (name, worst_error, tolerance, passed)."""
    rows = []

    # mixed Hessian identity vs finite differences
    worst = 0.0
    for seed in range(n_seeds):
        problem, sspec, tspec, dims = _verify_problem(size, seed)
        w = models.init_params(models.student_layout(sspec), seed + 17)
        a = models.init_params(models.teacher_layout(tspec), seed + 37)
        i = seed % len(problem.noisy_labels)
        dense = bilevel.mixed_hessian_dense(problem, w, a, i)
        fd = bilevel.fd_mixed_hessian(problem, w, a, i, step=1e-4)
        scale = max(np.abs(dense).max(), np.abs(fd).max())
        worst = max(worst, float(np.abs(dense - fd).max() / scale))
    rows.append(("mixed-hessian-vs-fd", worst, 1e-5, worst < 1e-5))

    # one-step meta-gradient vs unrolled oracle
    worst = 0.0
    for seed in range(n_seeds):
        problem, sspec, tspec, dims = _verify_problem(size, seed)
        w0 = models.init_params(models.student_layout(sspec), seed + 100)
        a = models.init_params(models.teacher_layout(tspec), seed + 200)
        rng = np.random.default_rng(seed + 300)
        bidx = data.sample_batch(len(problem.noisy_labels), dims["batch"], rng)
        cidx = data.sample_batch(16, 8, rng)
        w1 = bilevel.inner_step(problem, w0, a, bidx, 0.1)
        g_w = bilevel.clean_feedback_grad(problem, w1, cidx)
        got = bilevel.one_step_meta_grad(problem, w0, w1, a, bidx, g_w, 0.1)
        orc = bilevel.unrolled_oracle(problem, w0, a, [bidx], cidx, 0.1)
        worst = max(
            worst,
            float(np.linalg.norm(got.grad - orc.grad) / np.linalg.norm(orc.grad)),
        )
    rows.append(("one-step-vs-oracle", worst, 1e-8, worst < 1e-8))

    # identity-Hessian construction: discounted sum is exact for k in {2, 5}
    worst = 0.0
    rng = np.random.default_rng(7)
    coupling = rng.normal(size=(6, 4))
    quad = bilevel.QuadraticBilinearProblem(coupling)
    for k in (2, 5):
        w0 = rng.normal(size=6)
        a0 = rng.normal(size=4)
        batches = [np.array([0])] * k
        buf = bilevel.SnapshotBuffer(k)
        w = w0
        for b in batches:
            w1 = bilevel.inner_step(quad, w, a0, b, 0.1)
            buf.push(w, b, w1)
            w = w1
        g_w = bilevel.clean_feedback_grad(quad, w, np.array([0]))
        mg = bilevel.fpmg(quad, buf, a0, g_w, 0.1)
        orc = bilevel.unrolled_oracle(
            quad, w0, a0, batches, np.array([0]), 0.1, method="exact"
        )
        worst = max(
            worst,
            float(np.linalg.norm(mg.grad - orc.grad) / np.linalg.norm(orc.grad)),
        )
    rows.append(("identity-hessian-exact", worst, 1e-10, worst < 1e-10))
    return rows


def _cmd_verify(args) -> int:
    rows = run_gradient_checks(args.size, args.seeds)
    width = max(len(r[0]) for r in rows)
    ok = True
    for name, err, tol, passed in rows:
        status = "PASS" if passed else "FAIL"
        print(f"{name:<{width}}  err={err:.3e}  tol={tol:.0e}  {status}")
        ok &= passed
    print("all checks passed" if ok else "verification FAILED")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# train / inject-noise / report
# ---------------------------------------------------------------------------

def _cmd_train(args) -> int:
    cfg = harness.load_config(args.config)
    if args.out_dir is not None:
        cfg = replace(cfg, out_dir=args.out_dir)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if not cfg.out_dir:
        print("error: no out_dir in config or --out-dir", file=sys.stderr)
        return 2

    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        workers = max(1, int(os.environ.get("EMLC_THREADS", "1")))
        cfgs = [
            replace(cfg, seed=s, out_dir=os.path.join(cfg.out_dir, f"seed_{s}"))
            for s in seeds
        ]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(harness.run_experiment, c, args.baseline) for c in cfgs
            ]
            for s, fut in zip(seeds, futures):
                summary = fut.result()
                print(f"seed {s}: best_accuracy={summary['best_accuracy']}")
        return 0

    summary = harness.run_experiment(cfg, args.baseline)
    print(json.dumps({k: summary[k] for k in (
        "best_accuracy", "final_accuracy", "best_total_recovery",
        "best_wrong_recovery", "final_meta_loss")}, indent=2))
    return 0


def _cmd_inject(args) -> int:
    examples = data.load_examples_csv(args.input)
    spec = data.NoiseSpec(args.kind, args.rate)
    noisy = data.inject_noise(examples, spec, args.seed)
    data.save_noisy_csv(args.output, noisy)
    wrong = sum(e.noisy_label != e.true_label for e in noisy)
    print(f"wrote {len(noisy)} rows to {args.output} ({wrong} corrupted)")
    return 0


def _cmd_report(args) -> int:
    metrics = harness.read_metrics_csv(args.metrics)
    summary = harness.summarize_metrics(metrics)
    summary["rows"] = len(metrics)
    text = json.dumps(summary, indent=2)
    print(text)
    if args.json_out:
        with open(args.json_out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return 0


def run_cli(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "verify-gradients":
            return _cmd_verify(args)
        if args.command == "inject-noise":
            return _cmd_inject(args)
        if args.command == "report":
            return _cmd_report(args)
    except (ConfigError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 2


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
