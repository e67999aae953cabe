"""``nrdf`` command-line interface.

Every command writes its artifacts plus ``<out>.manifest.json`` describing
the run. Exit codes: 0 ok, 2 usage, 3 I/O, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    PoseDataset,
    SyntheticManifoldConfig,
    build_fm_training_set,
    build_training_set,
    gen_synthetic_manifold,
    label_with_nn,
    load_pairs,
    load_poses,
    save_pairs,
    save_poses,
)
from .errors import (
    ArchitectureMismatch,
    DimensionMismatch,
    EmptyDataset,
    MalformedCheckpoint,
    MalformedFile,
    MaxItersExceeded,
    NRDFError,
    NonUnitQuaternion,
    TooFewPoses,
)
from .evalkit import (
    IKConfig,
    IKProblem,
    chain_skeleton,
    compute_report,
    forward_kinematics,
    generate_diverse,
    hist_realized_distances,
    ik_solve,
)
from .netfield import ModelArchitecture, TrainConfig, load_model, model_init, save_loss_curve, save_model, train
from .projection import ProjectionConfig, euclidean_baseline_batch, project_batch
from .sampling import DistanceSpec, SamplerConfig, perturb_poses, sample_posendf_style, spawn_rngs

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4
THREADS_ENV = "NRDF_NUM_THREADS"


class UsageError(Exception):
    pass


def _metric(text):
    return {"l1": 1, "l2": 2}[text]


def _sampler_arg(text):
    """``posendf:<sigma>`` or any :class:`DistanceSpec` string."""
    kind, _, rest = text.partition(":")
    if kind == "posendf":
        try:
            sigma = float(rest)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad sigma in {text!r}") from None
        if sigma <= 0:
            raise argparse.ArgumentTypeError("posendf sigma must be > 0")
        return ("posendf", sigma)
    try:
        return ("tangent", DistanceSpec.parse(text))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _spec_arg(text):
    try:
        return DistanceSpec.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _index_list(text):
    if not text.strip():
        return []
    try:
        return [int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated joint indices, got {text!r}") from None


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# commands; each returns (outputs, inputs, exit code)


def cmd_synth(args):
    cfg = SyntheticManifoldConfig(K=args.k, latent_dim=args.latent_dim, n_poses=args.n, seed=args.seed)
    save_poses(gen_synthetic_manifold(cfg), args.out)
    return [args.out], [], EXIT_OK


def _draw_queries(dataset, sampler, n, p, rng):
    seeds = dataset.poses[rng.integers(0, len(dataset), n)]
    kind, value = sampler
    if kind == "posendf":
        return np.stack([sample_posendf_style(s, value, rng) for s in seeds]) if n else seeds
    out, _ = perturb_poses(seeds, SamplerConfig(value, p=p), rng)
    return out


def cmd_sample(args):
    dataset = load_poses(args.poses)
    p = _metric(args.metric)
    rng = np.random.default_rng(args.seed)
    if args.dist[0] == "tangent":
        pairs = build_training_set(dataset, SamplerConfig(args.dist[1], p=p), args.n, rng)
    else:
        pairs = label_with_nn(_draw_queries(dataset, args.dist, args.n, p, rng), dataset, p)
    save_pairs(pairs, args.out)
    hist_path = args.hist or f"{args.out}.hist.csv"
    if len(pairs):
        hist_realized_distances(pairs.queries, dataset, p, args.bins).to_csv(hist_path)
    else:
        _write_csv(hist_path, ["bin_lo", "bin_hi", "count"], [])
    return [args.out, hist_path], [args.poses], EXIT_OK


def cmd_train(args):
    dataset = load_poses(args.poses)
    p = _metric(args.metric)
    init_rng, data_rng, train_rng = spawn_rngs(args.seed, 3)
    inputs = [args.poses]
    if args.mode == "fmdis":
        n = args.n_pairs if args.n_pairs is not None else (len(load_pairs(args.pairs)) if args.pairs else 20000)
        pairs = build_fm_training_set(dataset, n, data_rng, p)
    else:
        if not args.pairs:
            raise UsageError("--pairs is required in nrdf mode")
        pairs = load_pairs(args.pairs)
        inputs.append(args.pairs)
    arch = ModelArchitecture(K=dataset.K, decoder_hidden=tuple(args.hidden))
    cfg = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        stage2_frac=args.stage2_frac,
        loss=args.loss,
        p=p,
        seed=args.seed,
        mode=args.mode,
    )
    model, curve = train(model_init(arch, init_rng), dataset, pairs, cfg, train_rng)
    save_model(model, args.out)
    loss_path = args.loss_csv or f"{args.out}.loss.csv"
    save_loss_curve(curve, loss_path)
    return [args.out, loss_path], inputs, EXIT_OK


def cmd_project(args):
    model = load_model(args.model)
    starts = load_poses(args.poses).poses
    cfg = ProjectionConfig(alpha=args.alpha, max_iters=args.max_iters, convergence_tol=args.tol)
    if args.baseline == "euclid":
        poses, iters, values, conv = euclidean_baseline_batch(model, starts, args.lr, cfg)
    else:
        poses, iters, values, conv = project_batch(model, starts, cfg)
    save_poses(PoseDataset(poses, K=model.arch.K), args.out)
    iter_path = args.iterations or f"{args.out}.iters.csv"
    _write_csv(
        iter_path,
        ["index", "method", "iterations", "f_value", "converged"],
        [[i, args.baseline, int(n), _fmt(v), int(c)] for i, (n, v, c) in enumerate(zip(iters, values, conv))],
    )
    code = EXIT_OK if conv.all() else EXIT_NUMERICAL
    if code:
        print(f"nrdf: {int((~conv).sum())} projections hit --max-iters", file=sys.stderr)
    return [args.out, iter_path], [args.model, args.poses], code


def cmd_generate(args):
    model = load_model(args.model)
    dataset = load_poses(args.poses)
    rng = np.random.default_rng(args.seed)
    cfg = ProjectionConfig(alpha=args.alpha, max_iters=args.max_iters, convergence_tol=args.tol)
    out = generate_diverse(model, dataset, args.n, SamplerConfig(args.dist, p=_metric(args.metric)), cfg, rng,
                           source=args.source)
    save_poses(PoseDataset(np.array(out).reshape(len(out), dataset.K, 4), K=dataset.K), args.out)
    outputs = [args.out]
    if out:
        report = compute_report(np.array(out), dataset, chain_skeleton(dataset.K), p=_metric(args.metric))
        report_path = args.report or f"{args.out}.report.json"
        report.to_json(report_path)
        outputs.append(report_path)
    return outputs, [args.model, args.poses], EXIT_OK


def cmd_ik(args):
    truth = load_poses(args.poses)
    K = truth.K
    prior = load_model(args.model) if args.model else None
    skel = chain_skeleton(K, bone_length=args.bone_length)
    if any(not 0 <= j < K for j in args.occlude):
        raise UsageError(f"--occlude indices must lie in [0, {K})")
    observed = [j for j in range(K) if j not in set(args.occlude)]
    rng = np.random.default_rng(args.seed)
    n = len(truth) if args.n is None else min(args.n, len(truth))
    inits, _ = perturb_poses(truth.poses[:n], SamplerConfig(args.init_dist, p=2), rng) if n else (truth.poses[:0], None)
    cfg = IKConfig(step=args.step, max_iters=args.max_iters, warmup_iters=args.warmup)
    results, rows, code = [], [], EXIT_OK
    for i in range(n):
        gt = truth.poses[i]
        problem = IKProblem(skel, observed, forward_kinematics(skel, gt)[observed], prior=prior,
                            lambda_pose=args.lambda_pose)
        f0 = float(prior.evaluate(inits[i])[0]) if prior is not None else float("nan")
        try:
            pose, diag = ik_solve(problem, inits[i], cfg)
            ok = 1
        except MaxItersExceeded as exc:
            pose = exc.best.pose
            diag = {"iterations": cfg.max_iters, "joint_error": float(problem.joint_error(pose)),
                    "prior_value": float(prior.evaluate(pose)[0]) if prior is not None else None}
            ok, code = 0, EXIT_NUMERICAL
        results.append(pose)
        f1 = diag["prior_value"] if diag["prior_value"] is not None else float("nan")
        rows.append([i, diag["iterations"], _fmt(diag["joint_error"]), _fmt(f0), _fmt(f1), ok])
    save_poses(PoseDataset(np.array(results).reshape(n, K, 4), K=K), args.out)
    diag_path = args.diagnostics or f"{args.out}.ik.csv"
    _write_csv(diag_path, ["index", "iterations", "joint_error_m", "f_init", "f_final", "converged"], rows)
    if code:
        print("nrdf: some IK problems hit --max-iters", file=sys.stderr)
    inputs = [args.poses] + ([args.model] if args.model else [])
    return [args.out, diag_path], inputs, code


def cmd_eval(args):
    poses = load_poses(args.poses)
    dataset = load_poses(args.dataset)
    refs = load_poses(args.references).poses if args.references else None
    report = compute_report(poses.poses, dataset, chain_skeleton(dataset.K, args.bone_length), refs,
                            p=_metric(args.metric))
    report.to_json(args.out)
    csv_path = args.csv or f"{args.out}.csv"
    report.to_csv(csv_path)
    inputs = [args.poses, args.dataset] + ([args.references] if args.references else [])
    return [args.out, csv_path], inputs, EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(prog="nrdf", description="Neural distance fields on pose manifolds.")
    parser.add_argument("--version", action="version", version=f"nrdf {__version__}")
    parser.add_argument("--deterministic", action="store_true",
                        help="force single-threaded numerics for bit-identical reruns")
    parser.add_argument("--threads", type=int, default=None,
                        help=f"BLAS thread count (default: ${THREADS_ENV} or the library default)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=func)
        sp.add_argument("--seed", type=int, default=0)
        return sp

    sp = add("synth", cmd_synth, "generate a synthetic pose manifold")
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--latent-dim", type=int, default=2)
    sp.add_argument("--n", type=int, default=2000)
    sp.add_argument("--out", required=True)

    sp = add("sample", cmd_sample, "draw noisy poses and label them with NN distances")
    sp.add_argument("--poses", required=True)
    sp.add_argument("--dist", type=_sampler_arg, default=_sampler_arg("halfgauss:0.7853981633974483"),
                    help="halfgauss:s | exp:l | uniform:a,b | dirac:h | posendf:s")
    sp.add_argument("--n", type=int, default=20000)
    sp.add_argument("--metric", choices=["l1", "l2"], default="l1")
    sp.add_argument("--bins", type=int, default=50)
    sp.add_argument("--hist")
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train a distance field")
    sp.add_argument("--poses", required=True)
    sp.add_argument("--pairs")
    sp.add_argument("--mode", choices=["nrdf", "fmdis"], default="nrdf")
    sp.add_argument("--n-pairs", type=int, help="fmdis mode: number of pairs to draw")
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--epochs", type=int, default=40)
    sp.add_argument("--stage2-frac", type=float, default=0.25)
    sp.add_argument("--batch-size", type=int, default=256)
    sp.add_argument("--loss", choices=["l1", "l2"], default="l1")
    sp.add_argument("--metric", choices=["l1", "l2"], default="l1")
    sp.add_argument("--hidden", type=int, nargs="+", default=[256, 256, 256])
    sp.add_argument("--loss-csv")
    sp.add_argument("--out", required=True)

    def projection_flags(sp):
        sp.add_argument("--model", required=True)
        sp.add_argument("--alpha", type=float, default=1.0)
        sp.add_argument("--tol", type=float, default=1e-5)
        sp.add_argument("--max-iters", type=int, default=200)

    sp = add("project", cmd_project, "project poses onto the learned zero level set")
    projection_flags(sp)
    sp.add_argument("--poses", required=True)
    sp.add_argument("--baseline", choices=["rdfgrad", "euclid"], default="rdfgrad")
    sp.add_argument("--lr", type=float, default=0.1, help="step size of the euclid baseline")
    sp.add_argument("--iterations")
    sp.add_argument("--out", required=True)

    sp = add("generate", cmd_generate, "sample and project new poses")
    projection_flags(sp)
    sp.add_argument("--poses", required=True, help="dataset the seeds are drawn from")
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--dist", type=_spec_arg, default=_spec_arg("halfgauss:0.7853981633974483"))
    sp.add_argument("--source", choices=["perturb", "gaussian"], default="perturb")
    sp.add_argument("--metric", choices=["l1", "l2"], default="l1")
    sp.add_argument("--report")
    sp.add_argument("--out", required=True)

    sp = add("ik", cmd_ik, "fit poses to observed joint positions")
    sp.add_argument("--poses", required=True, help="ground-truth poses; observations come from their FK")
    sp.add_argument("--model", help="distance-field prior (omit for pure FK fitting)")
    sp.add_argument("--occlude", type=_index_list, default=[])
    sp.add_argument("--lambda-pose", type=float, default=5.0)
    sp.add_argument("--init-dist", type=_spec_arg, default=_spec_arg("dirac:0.5"))
    sp.add_argument("--n", type=int)
    sp.add_argument("--step", type=float, default=0.1)
    sp.add_argument("--warmup", type=int, default=10)
    sp.add_argument("--max-iters", type=int, default=500)
    sp.add_argument("--bone-length", type=float, default=0.25)
    sp.add_argument("--diagnostics")
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "evaluation metrics of a pose set")
    sp.add_argument("--poses", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--references", help="paired ground truth for m2m")
    sp.add_argument("--metric", choices=["l1", "l2"], default="l1")
    sp.add_argument("--bone-length", type=float, default=0.25)
    sp.add_argument("--csv")
    sp.add_argument("--out", required=True)
    return parser


def _thread_limit(args):
    n = 1 if args.deterministic else args.threads
    if n is None and os.environ.get(THREADS_ENV):
        n = int(os.environ[THREADS_ENV])
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _flags(args):
    out = {}
    for k, v in sorted(vars(args).items()):
        if k == "func":
            continue
        if isinstance(v, tuple) and v and v[0] in ("tangent", "posendf"):
            v = f"posendf:{v[1]}" if v[0] == "posendf" else str(v[1])
        elif isinstance(v, DistanceSpec):
            v = str(v)
        out[k] = v
    return out


def write_manifest(path, args, outputs, inputs, duration, exit_code):
    manifest = {
        "command": args.command,
        "flags": _flags(args),
        "seed": args.seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "exit_code": exit_code,
        "duration_s": duration,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    start = time.perf_counter()
    try:
        with _thread_limit(args):
            outputs, inputs, code = args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, MalformedFile, MalformedCheckpoint, NonUnitQuaternion,
            ArchitectureMismatch) as exc:
        print(f"nrdf: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DimensionMismatch, EmptyDataset, TooFewPoses) as exc:
        print(f"nrdf: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NRDFError, FloatingPointError) as exc:
        print(f"nrdf: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"nrdf: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        write_manifest(f"{args.out}.manifest.json", args, outputs, inputs,
                       time.perf_counter() - start, code)
    except OSError as exc:
        print(f"nrdf: {exc}", file=sys.stderr)
        return EXIT_IO
    return code


if __name__ == "__main__":
    sys.exit(main())
