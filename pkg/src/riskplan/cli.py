"""Command-line front end: ``plan``, ``track``, ``mc`` and ``report``.

Exit codes: 0 success, 2 invalid input, 3 missing or mismatched artifacts,
4 no plan found.  Every artifact-producing command writes ``manifest.json``
with status ``running`` before anything else and rewrites it with status
``complete`` and artifact checksums at the end, so an interrupted run leaves
a detectable manifest behind.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Ellipse, Polygon  # noqa: E402

from .control import TrajectorySegment  # noqa: E402
from .env_model import BICYCLE, GAUSSIAN, LAPLACIAN, UNICYCLE  # noqa: E402
from .planner import plan  # noqa: E402
from .risk import MODES  # noqa: E402
from .scenario import BUNDLED, ConfigError, ScenarioConfig, load_bundled, load_scenario  # noqa: E402
from .simulation import monte_carlo, track  # noqa: E402

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_ARTIFACTS = 3
EXIT_NO_PLAN = 4

MANIFEST = "manifest.json"
REFERENCE = "reference.csv"
TREE = "tree.json"
SCENARIO_COPY = "scenario.yaml"
SUMMARY = "summary.json"
TRIALS = "trials.csv"
REPORT = "report.md"

STATE_COLUMNS = {
    UNICYCLE: ("x_m", "y_m", "heading_rad"),
    BICYCLE: ("x_m", "y_m", "heading_rad", "speed_mps"),
}
INPUT_COLUMNS = {
    UNICYCLE: ("v_mps", "omega_radps"),
    BICYCLE: ("accel_mps2", "steer_rad"),
}
COV_COLUMNS = ("cov_xx", "cov_xy", "cov_yy")

# fixed SVG ids and no date stamp keep plots byte-identical across runs
plt.rcParams["svg.hashsalt"] = "riskplan"
_SVG_META = {"Date": None, "Creator": None}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers


def _fmt(v: float) -> str:
    return "" if v is None else repr(float(v))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, record: dict, status: str, artifacts: list[str]) -> None:
    body = dict(record)
    body["status"] = status
    body["artifacts"] = {name: _sha256(out / name) for name in sorted(artifacts)}
    (out / MANIFEST).write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")


def _read_manifest(directory: Path) -> dict | None:
    path = directory / MANIFEST
    if not path.is_file():
        return None
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError:
        return None


def _load(scenario: str) -> ScenarioConfig:
    try:
        if scenario in BUNDLED and not Path(scenario).exists():
            return load_bundled(scenario)
        return load_scenario(scenario)
    except ConfigError as exc:
        raise CliError(EXIT_INVALID, f"invalid scenario: {exc}") from None


def _configure(sc: ScenarioConfig, mode: str | None, noise_scale: float | None, family: str | None) -> ScenarioConfig:
    try:
        if mode is not None:
            sc = sc.with_mode(mode)
        if noise_scale is not None:
            sc = sc.with_noise_scale(noise_scale)
        if family is not None:
            sc = sc.with_noise_family(family)
    except ConfigError as exc:
        raise CliError(EXIT_INVALID, str(exc)) from None
    return sc


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_INVALID, f"cannot create output directory {path}: {exc.strerror}") from None
    return out


# ---------------------------------------------------------------------------
# reference file


def write_reference(path: Path, seg: TrajectorySegment, sc: ScenarioConfig) -> None:
    """One row per belief: robot mean, position covariance, and the input applied from it."""
    kind = sc.robot.kind
    n = sc.robot.n
    header = ("step",) + STATE_COLUMNS[kind] + COV_COLUMNS + INPUT_COLUMNS[kind]
    lines = [",".join(header)]
    K = len(seg)
    for k in range(K):
        mean = seg.means[k][:n]
        cov = seg.covs[k]
        u = seg.inputs[k] if k < seg.inputs.shape[0] else (None, None)
        row = [str(k)] + [_fmt(v) for v in mean] + [_fmt(cov[0, 0]), _fmt(cov[0, 1]), _fmt(cov[1, 1])]
        row += [_fmt(v) for v in u]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")


def read_reference(path: Path, sc: ScenarioConfig) -> TrajectorySegment:
    """Inverse of :func:`write_reference`; raises ``CliError`` (exit 3) on any mismatch."""
    if not path.is_file():
        raise CliError(EXIT_ARTIFACTS, f"reference file not found: {path}")
    kind = sc.robot.kind
    n = sc.robot.n
    expected = ["step", *STATE_COLUMNS[kind], *COV_COLUMNS, *INPUT_COLUMNS[kind]]
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != expected:
        raise CliError(EXIT_ARTIFACTS, f"reference columns do not match a {kind} scenario: expected {expected}")
    body = rows[1:]
    if not body:
        raise CliError(EXIT_ARTIFACTS, "reference file has no states")
    try:
        means = np.array([[float(v) for v in r[1 : 1 + n]] for r in body])
        covs = np.array([[[float(r[1 + n]), float(r[2 + n])], [float(r[2 + n]), float(r[3 + n])]] for r in body])
        inputs = np.array([[float(v) for v in r[4 + n : 6 + n]] for r in body[:-1]]).reshape(-1, 2)
    except (ValueError, IndexError):
        raise CliError(EXIT_ARTIFACTS, "reference file has malformed rows") from None
    if not (np.all(np.isfinite(means)) and np.all(np.isfinite(inputs))):
        raise CliError(EXIT_ARTIFACTS, "reference file has non-finite values")
    return TrajectorySegment(means, covs, inputs, math.nan, True)


# ---------------------------------------------------------------------------
# plots


def _draw_map(ax, sc: ScenarioConfig) -> None:
    ex0, ex1, ey0, ey1 = sc.environment.bounds()
    ax.add_patch(Polygon(sc.environment.vertices(), closed=True, fill=False, ec="black", lw=1.5))
    ax.add_patch(Polygon(sc.goal_region.vertices(), closed=True, fc="#9ad19a", ec="green", ls="--", alpha=0.6))
    for obs in sc.obstacles:
        ax.add_patch(Polygon(obs.occupied().vertices(), closed=True, fc="black"))
    start = sc.start.mean
    ax.plot([start[0]], [start[1]], marker="^", color="white", mec="black", ms=9, zorder=5)
    pad = 0.02 * max(ex1 - ex0, ey1 - ey0)
    ax.set_xlim(ex0 - pad, ex1 + pad)
    ax.set_ylim(ey0 - pad, ey1 + pad)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")


def _ellipse(mean, cov, n_sigma: float = 2.0) -> Ellipse:
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    vals = np.clip(vals, 0.0, None)
    angle = math.degrees(math.atan2(vecs[1, 1], vecs[0, 1]))
    return Ellipse(
        (mean[0], mean[1]),
        2 * n_sigma * math.sqrt(vals[1]),
        2 * n_sigma * math.sqrt(vals[0]),
        angle=angle,
        fc="none",
        ec="#e0b000",
        lw=0.6,
    )


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def plot_plan(path: Path, sc: ScenarioConfig, tree, reference: TrajectorySegment | None) -> None:
    fig, ax = plt.subplots(figsize=(7, 7))
    _draw_map(ax, sc)
    for node in tree.nodes:
        m = node.segment.means
        if m.shape[0] > 1:
            ax.plot(m[:, 0], m[:, 1], color="#ff8c1a", lw=0.6)
        ax.add_patch(_ellipse(node.terminal_mean[:2], node.terminal_cov[:2, :2]))
    if reference is not None:
        ax.plot(reference.means[:, 0], reference.means[:, 1], color="#1f4fd1", lw=1.8)
    ax.set_title(f"{sc.name}: {len(tree)} nodes, {len(tree.goal_nodes)} in goal")
    _save(fig, path)


def plot_paths(path: Path, sc: ScenarioConfig, reference: TrajectorySegment, trials, title: str) -> None:
    fig, ax = plt.subplots(figsize=(7, 7))
    _draw_map(ax, sc)
    for t in trials:
        color = "#d62728" if t.collided else "#2ca02c"
        ax.plot(t.path[:, 0], t.path[:, 1], color=color, lw=0.5, alpha=0.6)
    ax.plot(reference.means[:, 0], reference.means[:, 1], color="#1f4fd1", lw=1.5, ls="--")
    ax.set_title(title)
    _save(fig, path)


# ---------------------------------------------------------------------------
# commands


def _record(command: str, args: dict) -> dict:
    return {"command": command, **args}


def cmd_plan(scenario: str, seed: int, max_iters: int | None, mode: str | None, out_dir: str, noise_scale: float | None = None) -> int:
    """Plan a reference and write tree, reference, scenario copy, plot and manifest."""
    if max_iters is not None and max_iters < 1:
        raise CliError(EXIT_INVALID, "--iters must be at least 1")
    sc = _configure(_load(scenario), mode, noise_scale, None)
    out = _out_dir(out_dir)
    record = _record(
        "plan",
        {
            "scenario": scenario,
            "seed": seed,
            "out": out_dir,
            "mode": sc.risk.mode,
            "iterations": sc.planner.max_iterations if max_iters is None else max_iters,
            "noise_scale": noise_scale,
        },
    )
    _write_manifest(out, record, "running", [])
    result = plan(sc, max_iters=max_iters, seed=seed)
    (out / SCENARIO_COPY).write_text(sc.dumps())
    (out / TREE).write_text(result.tree.dumps(sc.robot.n) + "\n")
    artifacts = [SCENARIO_COPY, TREE, "plan.svg"]
    if result.found:
        write_reference(out / REFERENCE, result.reference, sc)
        artifacts.append(REFERENCE)
    plot_plan(out / "plan.svg", sc, result.tree, result.reference)
    record["iterations_run"] = result.iterations
    record["goal_node"] = result.goal_node
    record["reference_cost"] = None if not result.found else result.reference.cost
    _write_manifest(out, record, "complete", artifacts)
    if not result.found:
        print(f"no goal node after {result.iterations} iterations", file=sys.stderr)
        return EXIT_NO_PLAN
    print(f"reference with {len(result.reference)} states, cost {result.reference.cost:.6g} -> {out / REFERENCE}")
    return EXIT_OK


def _reference_path(reference: str | None, out_dir: str) -> Path:
    return Path(reference) if reference is not None else Path(out_dir) / REFERENCE


def cmd_track(
    scenario: str, reference: str | None, seed: int, out_dir: str, noise_scale: float | None = None, family: str | None = None
) -> int:
    """Run a single tracking trial and write the realised path."""
    sc = _configure(_load(scenario), None, noise_scale, family)
    ref = read_reference(_reference_path(reference, out_dir), sc)
    out = _out_dir(out_dir)
    record = _record(
        "track",
        {"scenario": scenario, "reference": reference, "seed": seed, "out": out_dir, "noise_scale": noise_scale, "noise_family": sc.noise_family},
    )
    _write_manifest(out, record, "running", [])
    trial = track(ref, sc, np.random.default_rng(seed))
    kind = sc.robot.kind
    cols = STATE_COLUMNS[kind]
    header = ["step", *("true_" + c for c in cols), *("est_" + c for c in cols), *INPUT_COLUMNS[kind]]
    n = sc.robot.n
    lines = [",".join(header)]
    for k in range(trial.path.shape[0]):
        u = trial.inputs[k] if k < trial.inputs.shape[0] else (None, None)
        row = [str(k)] + [_fmt(v) for v in trial.path[k][:n]] + [_fmt(v) for v in trial.estimates[k][:n]] + [_fmt(v) for v in u]
        lines.append(",".join(row))
    (out / "track.csv").write_text("\n".join(lines) + "\n")
    plot_paths(out / "track.svg", sc, ref, [trial], f"{sc.name}: seed {seed}")
    record.update(collided=trial.collided, reached_goal=trial.reached_goal, steps=trial.steps, failure=trial.failure)
    _write_manifest(out, record, "complete", ["track.csv", "track.svg"])
    print(f"collided={trial.collided} reached_goal={trial.reached_goal} steps={trial.steps}")
    return EXIT_OK


def cmd_mc(
    scenario: str,
    reference: str | None,
    n_trials: int,
    base_seed: int,
    out_dir: str,
    noise_scale: float | None = None,
    family: str | None = None,
) -> int:
    """Monte-Carlo campaign: summary, per-trial rows, spaghetti plot and manifest."""
    if n_trials < 1:
        raise CliError(EXIT_INVALID, "--trials must be at least 1")
    sc = _configure(_load(scenario), None, noise_scale, family)
    ref = read_reference(_reference_path(reference, out_dir), sc)
    out = _out_dir(out_dir)
    record = _record(
        "mc",
        {
            "scenario": scenario,
            "reference": reference,
            "seed": base_seed,
            "trials": n_trials,
            "out": out_dir,
            "noise_scale": noise_scale,
            "noise_family": sc.noise_family,
        },
    )
    _write_manifest(out, record, "running", [])
    summary = monte_carlo(sc, ref, n_trials, base_seed)
    dt = sc.robot.dt
    rows = summary.rows()
    fields = ["trial", "seed", "collided", "reached_goal", "steps", "sim_time_s", "failure"]
    lines = [",".join(fields)]
    for r in rows:
        lines.append(",".join([str(r["trial"]), str(r["seed"]), str(r["collided"]), str(r["reached_goal"]), str(r["steps"]), _fmt(r["steps"] * dt), r["failure"].replace(",", ";")]))
    (out / TRIALS).write_text("\n".join(lines) + "\n")
    body = {
        "scenario": sc.name,
        "noise_family": sc.noise_family,
        "noise_scale": noise_scale,
        "trials": n_trials,
        "base_seed": base_seed,
        "collisions": summary.collisions,
        "reached_goal": summary.reached,
        "failures": summary.failures,
        "mean_sim_time_s": float(np.mean([r["steps"] * dt for r in rows])),
    }
    (out / SUMMARY).write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")
    label = "scenario noise" if noise_scale is None else f"noise {noise_scale:g} I"
    plot_paths(out / "mc.svg", sc, ref, summary.trials, f"{sc.name}: {n_trials} trials, {sc.noise_family}, {label}")
    _write_manifest(out, record, "complete", [TRIALS, SUMMARY, "mc.svg"])
    print(
        f"{summary.collisions}/{n_trials} collisions, {summary.reached} reached the goal, "
        f"{summary.failures} failed; mean wall-clock {summary.mean_runtime:.4f} s per trial"
    )
    return EXIT_OK


def _campaigns(root: Path) -> list[dict]:
    found = []
    for directory in sorted([root, *[p for p in root.iterdir() if p.is_dir()]]):
        manifest = _read_manifest(directory)
        if manifest is None or manifest.get("command") != "mc" or manifest.get("status") != "complete":
            continue
        path = directory / SUMMARY
        if not path.is_file():
            continue
        found.append(json.loads(path.read_text()))
    return found


def format_report(campaigns: list[dict]) -> str:
    """Noise level vs collision count, one column pair per noise family."""
    levels = sorted({c["noise_scale"] if c["noise_scale"] is not None else -1.0 for c in campaigns})
    families = (LAPLACIAN, GAUSSIAN)
    header = "| noise (x I) | trials | " + " | ".join(f"{f} collisions | {f} mean sim time (s)" for f in families) + " |"
    lines = [header, "|" + "---|" * (2 + 2 * len(families))]
    for level in levels:
        cells = []
        trials = set()
        for fam in families:
            match = [c for c in campaigns if (c["noise_scale"] if c["noise_scale"] is not None else -1.0) == level and c["noise_family"] == fam]
            if match:
                c = match[-1]
                trials.add(c["trials"])
                cells += [str(c["collisions"]), f"{c['mean_sim_time_s']:.4f}"]
            else:
                cells += ["-", "-"]
        name = "scenario" if level == -1.0 else f"{level:g}"
        lines.append(f"| {name} | {'/'.join(str(t) for t in sorted(trials))} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(out_dir: str) -> int:
    """Aggregate completed campaigns under ``out_dir`` into ``report.md``."""
    root = Path(out_dir)
    if not root.is_dir():
        raise CliError(EXIT_ARTIFACTS, f"no such directory: {out_dir}")
    campaigns = _campaigns(root)
    if not campaigns:
        raise CliError(EXIT_ARTIFACTS, f"no completed campaigns under {out_dir}")
    table = format_report(campaigns)
    (root / REPORT).write_text(table)
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="riskplan", description="Risk-bounded motion planning and Monte-Carlo validation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, reference: bool):
        sp.add_argument("--scenario", required=True, help="scenario YAML file or bundled name (" + ", ".join(BUNDLED) + ")")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--noise-scale", type=float, default=None, help="replace process and sensor covariances by this multiple of I")
        if reference:
            sp.add_argument("--reference", default=None, help=f"reference CSV (default: OUT/{REFERENCE})")
            sp.add_argument("--noise-family", choices=(LAPLACIAN, GAUSSIAN), default=None)

    sp = sub.add_parser("plan", help="grow a tree and extract a reference")
    common(sp, False)
    sp.add_argument("--iters", type=int, default=None, help="maximum tree-expansion iterations")
    sp.add_argument("--mode", choices=MODES, default=None)

    sp = sub.add_parser("track", help="run one noisy tracking trial")
    common(sp, True)

    sp = sub.add_parser("mc", help="run a Monte-Carlo tracking campaign")
    common(sp, True)
    sp.add_argument("--trials", type=int, default=100)

    sp = sub.add_parser("report", help="tabulate completed campaigns")
    sp.add_argument("--out", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "plan":
            return cmd_plan(args.scenario, args.seed, args.iters, args.mode, args.out, args.noise_scale)
        if args.command == "track":
            return cmd_track(args.scenario, args.reference, args.seed, args.out, args.noise_scale, args.noise_family)
        if args.command == "mc":
            return cmd_mc(args.scenario, args.reference, args.trials, args.seed, args.out, args.noise_scale, args.noise_family)
        return cmd_report(args.out)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
