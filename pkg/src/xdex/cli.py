"""Command-line entry point: ``xdex <subcommand>``.

Exit codes: 0 success, 2 usage error, 3 input-format error, 4 numerical failure.
Every written artifact gets a ``<artifact>.manifest.json`` sidecar.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from xdex import __version__
from xdex.eigengrasp import (EigengraspBasis, compute_basis, explained_fraction, load_basis,
                             synthesize, synthetic_poses)
from xdex.formats import (FormatError, read_jsonl, read_poses, sha256_file, write_json,
                          write_jsonl, write_poses, write_poses_csv)
from xdex.pose_model import default_skeleton, hand_keypoints, load_skeleton, validate_pose
from xdex.retarget import RetargetConfig, map_targets, objective_value, resolve_scale, solve
from xdex.robot_hand import URDFError, fixture_path, fk, load_hand
from xdex.pipeline import SceneState, score_rollout
from xdex.surrogate import (TrainingDivergedError, TrainRecipe, fingertip_error,
                            generate_training_set, load_params, predict, save_params, train)

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(ValueError):
    pass


def default_seed() -> int:
    return int(os.environ.get("CROSSDEX_SEED", "0"))


def _emit(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _hand_path(value: str) -> Path:
    """Hand config path; the bundled fixtures are also reachable by name."""
    p = Path(value)
    if not p.exists() and value in ("four_finger", "five_finger"):
        return fixture_path(value)
    return p


def write_manifest(out: str | Path, args: argparse.Namespace, inputs: list, seed: int | None) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    manifest = {
        "command": args.command,
        "tool_version": __version__,
        "seed": seed,
        "config": config,
        "inputs": {str(p): sha256_file(p) for p in inputs if p is not None},
        "output": {str(out): sha256_file(out)},
    }
    write_json(str(out) + ".manifest.json", manifest)


def verify_manifest(path: str | Path) -> bool:
    """True when every digest recorded in a manifest matches the file on disk."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    files = {**doc["inputs"], **doc["output"]}
    return all(Path(p).exists() and sha256_file(p) == digest for p, digest in files.items())


def _retarget_config(args) -> RetargetConfig:
    return RetargetConfig(
        objective=args.objective,
        scale=args.scale,
        smoothness_weight=args.smoothness,
        max_iterations=args.max_iters,
        gradient_tolerance=args.gtol,
    )


# --------------------------------------------------------------------------
# commands


def cmd_synth_dataset(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    poses = synthetic_poses(args.n, rank=args.rank, seed=args.seed, spread=args.spread,
                            noise=args.noise)
    if args.csv:
        write_poses_csv(args.out, poses)
    else:
        write_poses(args.out, poses)
    write_manifest(args.out, args, [], args.seed)
    _emit({"out": args.out, "n": args.n, "rank": args.rank})
    return EXIT_OK


def cmd_eigengrasp(args) -> int:
    X = read_poses(args.dataset)
    if not 1 <= args.k <= min(len(X), X.shape[1]):
        raise UsageError(f"k must be in [1, {min(len(X), X.shape[1])}], got {args.k}")
    basis = compute_basis(X, args.k, centered=not args.uncentered)
    write_json(args.out, basis.to_json())
    write_manifest(args.out, args, [args.dataset], None)
    _emit({
        "out": args.out,
        "k": basis.k,
        "eigenvalues": basis.eigenvalues.tolist(),
        "explained_fraction": explained_fraction(basis, X),
    })
    return EXIT_OK


def cmd_retarget(args) -> int:
    basis = load_basis(args.basis)
    model = load_hand(_hand_path(args.hand))
    skeleton = load_skeleton(args.skeleton) if args.skeleton else default_skeleton()
    config = _retarget_config(args)
    scale = resolve_scale(model, config, skeleton)
    params = None
    if args.backend == "surrogate":
        if not args.weights:
            raise UsageError("--backend surrogate requires --weights")
        params = load_params(args.weights)
        if params.layer_dims[-1] != model.m:
            raise UsageError("surrogate weights do not match the hand's joint count")
    records = read_jsonl(args.stream)
    q_prev = model.mid_range()
    out = []
    t0 = time.perf_counter()
    for lineno, rec in enumerate(records, 1):
        if "weights" in rec:
            w = np.asarray(rec["weights"], dtype=np.float64)
            if w.shape != (basis.k,):
                raise UsageError(f"{args.stream}:{lineno}: stream has {w.size} weights, basis k = {basis.k}")
            theta = synthesize(basis, w)
            kp = hand_keypoints(skeleton, theta)
        elif "keypoints" in rec:
            if args.backend == "surrogate":
                raise UsageError(f"{args.stream}:{lineno}: surrogate backend needs weights, not keypoints")
            kp = np.asarray(rec["keypoints"], dtype=np.float64)
            theta = None
        else:
            raise FormatError(f"{args.stream}:{lineno}: record needs 'weights' or 'keypoints'")
        targets = map_targets(kp, model, scale)
        if args.backend == "surrogate":
            q = predict(params, theta[None, :])[0]
            entry = {}
        else:
            res = solve(model, targets, q_prev, config)
            q = res.q
            entry = {"objective": res.objective, "iterations": res.iterations}
        if not np.all(np.isfinite(q)):
            raise FloatingPointError(f"non-finite joint values at record {lineno}")
        entry.update({"t": rec.get("t", lineno - 1), "q": q.tolist(),
                      "delta": float(np.linalg.norm(q - q_prev))})
        out.append(entry)
        q_prev = q
    elapsed = time.perf_counter() - t0
    write_jsonl(args.out, out)
    write_manifest(args.out, args, [args.basis, _hand_path(args.hand), args.stream, args.skeleton,
                                    args.weights], None)
    # timing stays on stdout so that the trajectory file is reproducible byte for byte
    _emit({
        "out": args.out,
        "steps": len(out),
        "backend": args.backend,
        "objective": args.objective,
        "final_delta": out[-1]["delta"] if out else None,
        "final_objective": out[-1].get("objective") if out else None,
        "wall_clock_s": elapsed,
    })
    return EXIT_OK


def cmd_train_surrogate(args) -> int:
    model = load_hand(_hand_path(args.hand))
    poses = read_poses(args.poses)
    if len(poses) == 0:
        raise UsageError("pose dataset is empty")
    if args.max_poses:
        poses = poses[:args.max_poses]
    config = _retarget_config(args)
    recipe = TrainRecipe(epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size,
                         validation_fraction=args.val_fraction)
    dataset = generate_training_set(model, poses, config, jobs=args.jobs)

    def log(epoch, tr, va, dt):
        if args.verbose:
            print(f"epoch {epoch}: train {tr:.6g} val {va:.6g} ({dt:.2f}s)", file=sys.stderr)

    result = train(dataset, recipe, seed=args.seed, log=log)
    save_params(args.out, result.params)
    loss_csv = args.loss_csv or str(Path(args.out).with_suffix("")) + ".loss.csv"
    with open(loss_csv, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_mse,val_mse\n")
        for i, (tr, va) in enumerate(zip(result.train_loss, result.val_loss), 1):
            fh.write(f"{i},{tr!r},{va!r}\n")
    inputs = [_hand_path(args.hand), args.poses]
    write_manifest(args.out, args, inputs, args.seed)
    write_manifest(loss_csv, args, inputs, args.seed)
    pred = predict(result.params, dataset.inputs)
    _emit({
        "out": args.out,
        "loss_csv": loss_csv,
        "n": len(dataset.inputs),
        "initial_train_mse": result.train_loss[0],
        "final_train_mse": result.train_loss[-1],
        "final_val_mse": result.val_loss[-1],
        "train_tip_error": fingertip_error(model, pred[result.train_index], dataset.labels[result.train_index]),
        "val_tip_error": fingertip_error(model, pred[result.val_index], dataset.labels[result.val_index]),
    })
    return EXIT_OK


def benchmark_speedup(model, params, poses, config: RetargetConfig, repeats: int = 5) -> dict:
    """Throughput of one batched network call against sequential solver calls on the same poses."""
    skeleton = default_skeleton()
    P = validate_pose(poses)
    predict(params, P[:2])
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        predict(params, P)
        best = min(best, time.perf_counter() - t)
    config = RetargetConfig(**{**config.__dict__, "smoothness_weight": 0.0})
    scale = resolve_scale(model, config, skeleton)
    q0 = model.mid_range()
    solve(model, map_targets(hand_keypoints(skeleton, P[0]), model, scale), q0, config)
    t = time.perf_counter()
    for theta in P:
        solve(model, map_targets(hand_keypoints(skeleton, theta), model, scale), q0, config)
    oracle = time.perf_counter() - t
    return {
        "batch": len(P),
        "predict_poses_per_s": len(P) / best,
        "oracle_poses_per_s": len(P) / oracle,
        "speedup": oracle / best,
    }


def cmd_eval_surrogate(args) -> int:
    model = load_hand(_hand_path(args.hand))
    params = load_params(args.weights)
    if params.layer_dims[-1] != model.m:
        raise UsageError("surrogate weights do not match the hand's joint count")
    config = _retarget_config(args)
    poses = read_poses(args.poses) if args.poses else synthetic_poses(args.n, seed=args.seed + 1)
    report = {"weights": args.weights}
    if args.bench:
        report["bench"] = benchmark_speedup(model, params, poses[:args.batch], config)
    else:
        dataset = generate_training_set(model, poses, config, jobs=args.jobs)
        pred = predict(params, dataset.inputs)
        report.update({
            "n": len(poses),
            "tip_error": fingertip_error(model, pred, dataset.labels),
            "joint_mse": float(np.mean((pred - dataset.labels) ** 2)),
        })
    _emit(report)
    return EXIT_OK


def cmd_score(args) -> int:
    records = read_jsonl(args.rollout)
    if not records:
        raise FormatError(f"{args.rollout}: rollout is empty")
    scenes = []
    for lineno, rec in enumerate(records, 1):
        try:
            scenes.append(SceneState.from_record(rec))
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"{args.rollout}:{lineno}: malformed record ({exc})") from exc
    summary = score_rollout(scenes, args.mode)
    if args.out:
        write_json(args.out, summary)
        write_manifest(args.out, args, [args.rollout], None)
    _emit(summary)
    return EXIT_OK


def cmd_fk(args) -> int:
    model = load_hand(_hand_path(args.hand))
    if args.q:
        q = np.array([float(v) for v in args.q.split(",")])
    else:
        q = model.mid_range()
    if q.shape != (model.m,):
        raise UsageError(f"--q needs {model.m} values, got {q.size}")
    frames = fk(model, q)
    _emit({
        "actuated_order": list(model.actuated_order),
        "q": q.tolist(),
        "palm": frames.palm.tolist(),
        "tips": {tag: tip.tolist() for tag, tip in zip(model.finger_tags, frames.tips)},
    })
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _add_retarget_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--objective", choices=("position", "vector", "dexpilot"), default="dexpilot")
    p.add_argument("--scale", type=float, default=None, help="human->robot scale (default: hand config / length ratio)")
    p.add_argument("--smoothness", type=float, default=1.0)
    p.add_argument("--max-iters", type=int, default=50)
    p.add_argument("--gtol", type=float, default=1e-8)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xdex", description="Eigengrasp retargeting toolkit.")
    parser.add_argument("--version", action="version", version=f"xdex {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-dataset", help="sample poses from a low-rank generative model")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--rank", type=int, default=5)
    p.add_argument("--spread", type=float, default=0.35)
    p.add_argument("--noise", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=default_seed())
    p.add_argument("--csv", action="store_true", help="write CSV instead of binary")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_dataset)

    p = sub.add_parser("eigengrasp", help="PCA basis from a pose dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--uncentered", action="store_true", help="no mean term in synthesis")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eigengrasp)

    p = sub.add_parser("retarget", help="retarget a weights/keypoints stream to joint positions")
    p.add_argument("--basis", required=True)
    p.add_argument("--hand", required=True)
    p.add_argument("--skeleton", default=None)
    p.add_argument("--stream", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--backend", choices=("oracle", "surrogate"), default="oracle")
    p.add_argument("--weights", default=None)
    _add_retarget_flags(p)
    p.set_defaults(func=cmd_retarget)

    p = sub.add_parser("train-surrogate", help="label poses with the solver and fit the MLP")
    p.add_argument("--hand", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv", default=None)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--max-poses", type=int, default=None)
    p.add_argument("--seed", type=int, default=default_seed())
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--verbose", action="store_true")
    _add_retarget_flags(p)
    p.set_defaults(func=cmd_train_surrogate)

    p = sub.add_parser("eval-surrogate", help="audit a trained network against the solver")
    p.add_argument("--hand", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--poses", default=None)
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--seed", type=int, default=default_seed())
    p.add_argument("--bench", action="store_true", help="throughput vs sequential solver calls")
    p.add_argument("--batch", type=int, default=1024)
    p.add_argument("--jobs", type=int, default=1)
    _add_retarget_flags(p)
    p.set_defaults(func=cmd_eval_surrogate)

    p = sub.add_parser("score", help="score a rollout with the lift-task reward")
    p.add_argument("--rollout", required=True)
    p.add_argument("--mode", choices=("train", "test"), default="test")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("fk", help="palm and fingertip positions of a hand")
    p.add_argument("--hand", required=True)
    p.add_argument("--q", default=None, help="comma-separated joint values (default mid-range)")
    p.set_defaults(func=cmd_fk)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"xdex {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, URDFError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"xdex {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (TrainingDivergedError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"xdex {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"xdex {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
