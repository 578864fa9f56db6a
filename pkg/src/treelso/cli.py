"""``treelso`` command-line tool.

Settings come from three layers, later ones winning: built-in defaults, a
JSON file given with ``--config`` and command-line flags.  The file holds
sections ``task``, ``qae``, ``pretrain``, ``gbt`` and ``lso`` plus an optional
top-level ``seed``; unknown sections or keys are rejected.

Output goes below ``--out``, which defaults to ``$TREELSO_OUT`` (or
``./treelso-out``).  Exit codes: 0 success, 1 usage, 2 I/O or parse error,
3 numerical-domain error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import data, faces, gbt, lso, metrics, mio, qae
from .errors import FormatError, InvalidInputError, NumericalDomainError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

IMAGES, SCORES, CHECKPOINT = "images.img", "scores.csv", "qae.ckpt"


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class TaskConfig:
    n: int = 500
    max_degree: float = 2.0
    min_degree: float = 0.0
    reference_n: int = 500
    reference_min_degree: float = 3.0
    reference_max_degree: float = 5.0


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 70


# section -> (dataclass, exposed fields)
SECTIONS = {
    "task": (TaskConfig, ("n", "max_degree", "min_degree", "reference_n",
                          "reference_min_degree", "reference_max_degree")),
    "qae": (qae.QaeConfig, ("n_codes", "code_dim", "hidden", "beta", "learning_rate", "batch_size")),
    "pretrain": (PretrainConfig, ("epochs",)),
    "gbt": (gbt.GbtConfig, ("n_trees", "interaction_depth", "min_samples_leaf", "max_leaves", "shrinkage")),
    "lso": (lso.LsoConfig, ("budget", "retrain_every", "free_vars", "weight_k", "finetune_epochs",
                            "weighted_retraining", "anchor")),
}


def _field_type(cls, name):
    default = {f.name: f.default for f in dataclasses.fields(cls)}[name]
    return type(default)


def default_root() -> str:
    return os.environ.get("TREELSO_OUT") or "treelso-out"


# ---------------------------------------------------------------------------
# settings


def load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: top level must be an object")
    out = {}
    for section, body in raw.items():
        if section == "seed":
            if not isinstance(body, int):
                raise UsageError("seed must be an integer")
            out["seed"] = body
            continue
        if section not in SECTIONS:
            raise UsageError(f"{path}: unknown section {section!r}")
        if not isinstance(body, dict):
            raise UsageError(f"{path}: section {section!r} must be an object")
        cls, names = SECTIONS[section]
        for key, value in body.items():
            if key not in names:
                raise UsageError(f"{path}: unknown key {section}.{key}")
            want = _field_type(cls, key)
            if want is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if not isinstance(value, want) or (want is int and isinstance(value, bool)):
                raise UsageError(f"{path}: {section}.{key} must be {want.__name__}")
            out[(section, key)] = value
    return out


def settings(args, sections) -> dict:
    """Merge defaults, config file and flags into one dataclass per section."""
    from_file = load_config_file(args.config) if getattr(args, "config", None) else {}
    result = {}
    for section in sections:
        cls, names = SECTIONS[section]
        kwargs = {}
        for name in names:
            flag = getattr(args, name, None)
            if flag is not None:
                kwargs[name] = flag
            elif (section, name) in from_file:
                kwargs[name] = from_file[(section, name)]
        result[section] = (cls, kwargs)
    seed = args.seed if args.seed is not None else from_file.get("seed", 0)
    out = {"seed": seed}
    for section, (cls, kwargs) in result.items():
        out[section] = cls(**kwargs)
    return out


def lso_config(cfg: dict, seed: int, **overrides) -> lso.LsoConfig:
    return dataclasses.replace(cfg["lso"], gbt=cfg["gbt"], seed=seed, **overrides)


def parse_seeds(text: str) -> list:
    """``"1..5"`` or ``"1,2,7"``."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(s) for s in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def parse_ints(text: str) -> list:
    try:
        return [int(s) for s in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}")


# ---------------------------------------------------------------------------
# file helpers


def _write_text(path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _mkdir(path) -> None:
    os.makedirs(path, exist_ok=True)


def load_dataset(directory):
    images = data.read_images(os.path.join(directory, IMAGES))
    scores = data.read_scores(os.path.join(directory, SCORES))
    if len(images) != len(scores):
        raise FormatError(f"{directory}: {len(images)} images but {len(scores)} scores")
    return images, scores


def save_dataset(directory, images, scores) -> None:
    _mkdir(directory)
    data.write_images(os.path.join(directory, IMAGES), images)
    data.write_scores(os.path.join(directory, SCORES), scores)


def read_trajectory(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and list(rows[0]) != ["iter", "f_value", "surrogate_value", "top10", "top50"]:
        raise FormatError(f"{path}: unexpected columns")
    return rows


def _summary_csv(rows) -> str:
    lines = ["metric,mean,std"]
    for name, values in rows:
        v = np.asarray(values, dtype=np.float64)
        if v.size == 0 or np.isnan(v).any():
            lines.append(f"{name},,")
        else:
            lines.append(f"{name},{float(v.mean())!r},{float(v.std())!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> int:
    cfg = settings(args, ["task"])
    t = cfg["task"]
    if t.n < 1:
        raise UsageError("--n must be >= 1")
    images, scores, _ = faces.make_faces(t.n, t.max_degree, cfg["seed"], t.min_degree)
    save_dataset(args.out, images, scores)
    print(f"wrote {len(scores)} images to {args.out}: score min {scores.min():.4f} max {scores.max():.4f}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = settings(args, ["qae", "pretrain"])
    images, _ = load_dataset(args.data)
    qcfg = dataclasses.replace(cfg["qae"], seed=cfg["seed"])
    model, history = qae.pretrain(qcfg, images, cfg["pretrain"].epochs)
    _mkdir(args.out)
    path = os.path.join(args.out, CHECKPOINT)
    qae.save_checkpoint(model, path)
    rec = qae.vq_loss(model, images)
    print(f"wrote {path}: {len(history)} epochs, reconstruction mse {rec.reconstruction:.6f}")
    return EXIT_OK


def _run_into(directory, config: lso.LsoConfig, images, scores, model, data_dir, checkpoint) -> lso.Trajectory:
    traj = lso.run(config, lso.Task(faces.score, images, scores), model)
    _mkdir(directory)
    _write_text(os.path.join(directory, "trajectory.csv"), lso.trajectory_csv(traj))
    extra = {"inputs": {"data": os.path.abspath(data_dir), "checkpoint": os.path.abspath(checkpoint)}}
    _write_text(os.path.join(directory, "manifest.json"), lso.manifest_text(config, traj, extra))
    if traj.records:
        save_dataset(os.path.join(directory, "queries"),
                     np.stack([r.image for r in traj.records]), traj.f_values)
        qae.save_checkpoint(traj.final_model, os.path.join(directory, "final.ckpt"))
    return traj


def _inputs(args):
    images, scores = load_dataset(args.data)
    checkpoint = args.checkpoint or os.path.join(args.data, CHECKPOINT)
    return images, scores, qae.load_checkpoint(checkpoint), checkpoint


def cmd_optimize(args) -> int:
    cfg = settings(args, ["lso", "gbt"])
    images, scores, model, checkpoint = _inputs(args)
    config = lso_config(cfg, cfg["seed"])
    traj = _run_into(args.out, config, images, scores, model, args.data, checkpoint)
    best = f"{traj.f_values.max():.4f}" if traj.records else "n/a"
    print(f"wrote {args.out}: {len(traj.records)} queries, {len(traj.events)} retrain events, best {best}")
    return EXIT_OK


def cmd_eval(args) -> int:
    a = data.read_images(args.a)
    b = data.read_images(args.b)
    rows = [("fid_like", args.a, args.b, name, metrics.fid_like(a, b, name)) for name in args.feature_map]
    text = metrics.metric_csv(rows)
    _mkdir(args.out)
    _write_text(os.path.join(args.out, "metrics.csv"), text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_export_mio(args) -> int:
    with open(os.path.join(args.run, "manifest.json")) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest: {exc}") from exc
    rows = read_trajectory(os.path.join(args.run, "trajectory.csv"))
    if not 1 <= args.iter <= len(rows):
        raise UsageError(f"--iter must lie in 1..{len(rows)}")
    try:
        c = dict(manifest["config"])
        c["gbt"] = gbt.GbtConfig(**c["gbt"])
        config = lso.LsoConfig(**c)
        data_dir = manifest["inputs"]["data"]
        checkpoint = manifest["inputs"]["checkpoint"]
        expected_hash = manifest["initial_checkpoint_sha256"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"manifest is missing fields: {exc}") from exc
    images, scores = load_dataset(data_dir)
    model = qae.load_checkpoint(checkpoint)
    if qae.checkpoint_hash(model) != expected_hash:
        raise FormatError(f"{checkpoint} does not match the hash recorded in the manifest")
    traj = lso.run(config, lso.Task(faces.score, images, scores), model,
                   keep_surrogates={args.iter}, stop_after=args.iter)
    rec = traj.records[-1]
    if repr(rec.surrogate_value) != rows[args.iter - 1]["surrogate_value"]:
        raise FormatError("replayed run diverged from the recorded trajectory")
    text = mio.encode_mio(rec.surrogate, rec.domain(model.config.n_codes))
    out = args.out or os.path.join(args.run, f"query_{args.iter}.lp")
    _write_text(out, text)
    print(f"wrote {out}: surrogate value {rec.surrogate_value!r}")
    return EXIT_OK


def _reference(task: TaskConfig, seed: int):
    images, _, _ = faces.make_faces(task.reference_n, task.reference_max_degree, seed,
                                    task.reference_min_degree)
    return images


def _final(series) -> float:
    return float(series[-1]) if len(series) else float("nan")


def _seed_runs(directory, config_for_seed, seeds, args, reference):
    images, scores, model, checkpoint = _inputs(args)
    finals = {"top10_final": [], "top50_final": [], "fid_like": []}
    for s in seeds:
        traj = _run_into(os.path.join(directory, f"seed_{s}"), config_for_seed(s),
                         images, scores, model, args.data, checkpoint)
        finals["top10_final"].append(_final(traj.topk(10)))
        finals["top50_final"].append(_final(traj.topk(50)))
        queries = np.stack([r.image for r in traj.records]) if traj.records else np.empty((0,) + reference.shape[1:])
        fid = metrics.fid_like(queries, reference, "flatten") if len(queries) >= 2 else float("nan")
        finals["fid_like"].append(fid)
    return finals


def cmd_report(args) -> int:
    cfg = settings(args, ["lso", "gbt", "task"])
    reference = _reference(cfg["task"], args.reference_seed)
    finals = _seed_runs(args.out, lambda s: lso_config(cfg, s), args.seeds, args, reference)
    text = _summary_csv(finals.items())
    _write_text(os.path.join(args.out, "report.csv"), text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_t_sweep(args) -> int:
    cfg = settings(args, ["lso", "gbt", "task"])
    reference = _reference(cfg["task"], args.reference_seed)
    lines = ["t,fid_like_mean,fid_like_std,top10_mean,top10_std,top50_mean,top50_std"]
    for t in args.t_values:
        finals = _seed_runs(os.path.join(args.out, f"t_{t}"),
                            lambda s, t=t: lso_config(cfg, s, free_vars=t), args.seeds, args, reference)
        cells = [str(t)]
        for key in ("fid_like", "top10_final", "top50_final"):
            v = np.asarray(finals[key], dtype=np.float64)
            cells += ["", ""] if np.isnan(v).any() else [repr(float(v.mean())), repr(float(v.std()))]
        lines.append(",".join(cells))
    text = "\n".join(lines) + "\n"
    _write_text(os.path.join(args.out, "t_sweep.csv"), text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_section_flags(p, section):
    cls, names = SECTIONS[section]
    for name in names:
        flag = "--" + name.replace("_", "-")
        kind = _field_type(cls, name)
        default = {f.name: f.default for f in dataclasses.fields(cls)}[name]
        if kind is bool:
            p.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None,
                           help=f"default {default}")
        else:
            p.add_argument(flag, dest=name, type=kind, default=None, help=f"default {default}")


def build_parser() -> argparse.ArgumentParser:
    root = default_root()
    parser = _Parser(prog="treelso", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, sections, out_default, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", help="JSON settings file; flags override it")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=out_default, help=f"output directory (default {out_default})")
        for s in sections:
            _add_section_flags(p, s)
        return p

    command("synth-data", cmd_synth_data, ["task"], root, "write a synthetic face dataset")

    p = command("pretrain", cmd_pretrain, ["qae", "pretrain"], root, "train the autoencoder")
    p.add_argument("--data", default=root, help="dataset directory")

    def run_inputs(p):
        p.add_argument("--data", default=root, help="dataset directory")
        p.add_argument("--checkpoint", default=None, help="autoencoder checkpoint (default <data>/qae.ckpt)")

    p = command("optimize", cmd_optimize, ["lso", "gbt"], os.path.join(root, "run"), "run latent space optimization")
    run_inputs(p)

    p = command("eval", cmd_eval, [], root, "Fréchet distance between two image sets")
    p.add_argument("--a", required=True, help="first image container")
    p.add_argument("--b", required=True, help="second image container")
    p.add_argument("--feature-map", nargs="+", default=["flatten"], choices=sorted(metrics.FEATURE_MAPS))

    p = sub.add_parser("export-mio", help="write the LP program solved at one iteration")
    p.set_defaults(func=cmd_export_mio)
    p.add_argument("--run", default=os.path.join(root, "run"), help="directory written by optimize")
    p.add_argument("--iter", type=int, required=True)
    p.add_argument("--out", default=None, help="LP file (default <run>/query_<iter>.lp)")

    for name, func, out, help_text in (
            ("report", cmd_report, "report", "mean and std of final metrics over seeds"),
            ("t-sweep", cmd_t_sweep, "t-sweep", "compare free-variable counts")):
        p = command(name, func, ["lso", "gbt", "task"], os.path.join(root, out), help_text)
        run_inputs(p)
        p.add_argument("--seeds", type=parse_seeds, default=parse_seeds("1..5"), help="e.g. 1..5 or 1,3,4")
        p.add_argument("--reference-seed", type=int, default=12345,
                       help="seed of the generated high-degree reference set")
        if name == "t-sweep":
            p.add_argument("--t-values", type=parse_ints, default=[2, 4, 8])
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidInputError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalDomainError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
