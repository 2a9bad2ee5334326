"""Command line harness.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .agent import DQNAgent, run_episode
from .env import TrafficSignalEnv, run_fixed_time
from .gat import normalize_mode, run_prompt_gat
from .metrics import METRICS, StatisticsError, aggregate, correlation_matrix, gap_improvement, read_reports, \
    write_report
from .oracle import DynamicsOracle, OracleError, PromptContext, build_prompt, make_backend
from .scenario import SETTINGS, ConfigError, DomainContext, ExperimentConfig, load_config
from .streams import episode_seed

log = logging.getLogger("groundsim")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


@dataclasses.dataclass
class RunManifest:
    command: str
    mode: str | None
    setting: str | None
    seeds: list[int]
    config_path: str | None
    out_dir: str
    started: str
    finished: str = ""
    files: list[str] = dataclasses.field(default_factory=list)

    def write(self, out: Path) -> None:
        self.finished = _now()
        self.files = sorted(set(self.files) | {"manifest.json"})
        (out / "manifest.json").write_text(json.dumps(dataclasses.asdict(self), indent=1) + "\n")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


# --- argument handling -----------------------------------------------------------------

def _parse_seed_list(text: str) -> list[int]:
    try:
        seeds = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="groundsim", description="Sim-to-real signal control experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, setting=True, seeds=True):
        sp.add_argument("--config", type=Path, help="INI configuration file")
        sp.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
        if setting:
            sp.add_argument("--setting", choices=SETTINGS[1:], help="real-world profile (default: config)")
        if seeds:
            g = sp.add_mutually_exclusive_group()
            g.add_argument("--seeds", type=_positive_int, help="use seeds 0..N-1")
            g.add_argument("--seed-list", type=_parse_seed_list, help="comma-separated seeds")
            sp.add_argument("--jobs", type=_positive_int, default=1, help="seeds run concurrently")
            sp.add_argument("--log-episodes", action="store_true", help="write per-decision episode logs")

    sp = sub.add_parser("train-sim", help="train a policy in the simulator")
    common(sp)
    sp.add_argument("--resume", action="store_true", help="continue from an existing checkpoint in --out")

    sp = sub.add_parser("transfer", help="run direct, vanilla or prompt transfer and report the gap")
    common(sp)
    sp.add_argument("--mode", choices=("direct", "vanilla", "prompt"), default="direct")
    sp.add_argument("--oracle", choices=("rule", "replay", "remote"), help="oracle backend (default: config)")
    sp.add_argument("--checkpoint", type=Path, help="policy from train-sim; skips pretraining. "
                                                    "'{seed}' in the path is replaced per seed")
    sp.add_argument("--save-datasets", action="store_true", help="write D_sim and D_real per seed")

    sp = sub.add_parser("compare", help="gap improvements and correlations between report files")
    sp.add_argument("reports", nargs="+", type=Path, help="report.json files (the first is the baseline)")
    sp.add_argument("--out", type=Path, default=Path("compare"))

    sp = sub.add_parser("simulate", help="fixed-time baseline in both worlds")
    common(sp)
    sp.add_argument("--cycle", type=_positive_int, help="seconds per phase (default: config)")

    sp = sub.add_parser("oracle", help="one dynamics query, for debugging")
    sp.add_argument("--config", type=Path)
    sp.add_argument("--oracle", choices=("rule", "replay", "remote"))
    sp.add_argument("--weather", required=True, choices=("sunny", "rainy", "snowy"))
    sp.add_argument("--road", required=True, choices=("normal", "light_industry", "heavy_industry"))
    sp.add_argument("--count", type=int, required=True, help="vehicles on the lane")
    sp.add_argument("--show-prompt", action="store_true")
    return p


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "setting", None):
        cfg = cfg.with_setting(args.setting)
    if getattr(args, "oracle", None):
        cfg = cfg.replace(oracle=dataclasses.replace(cfg.oracle, backend=args.oracle))
    return cfg


def _seeds(args, cfg: ExperimentConfig) -> list[int]:
    if getattr(args, "seed_list", None):
        return list(args.seed_list)
    if getattr(args, "seeds", None):
        return list(range(args.seeds))
    return [cfg.seed]


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


def _rel(out: Path, path: Path) -> str:
    return str(path.relative_to(out))


# --- train-sim -----------------------------------------------------------------------------

def _train_one(job) -> dict:
    cfg, seed, out, resume, log_episodes = job
    ckpt = out / f"policy_seed{seed}.bin"
    curve_path = out / f"curve_seed{seed}.csv"
    agent = DQNAgent.from_config(cfg, seed)
    rows = []
    if resume and ckpt.exists():
        agent.load(ckpt)
        if curve_path.exists():
            rows = curve_path.read_text().splitlines()[1:agent.episodes + 1]
    env = TrafficSignalEnv(cfg, cfg.sim_profile,
                           log_path=out / "episodes" / f"train_seed{seed}.csv" if log_episodes else None)
    for ep in range(agent.episodes, cfg.trainer.episodes):
        eps = agent.epsilon
        rewards = run_episode(env, agent, seed=episode_seed(seed, "arrivals", ep))
        st = env.episode_stats()
        rows.append(f"{ep},{np.mean(rewards)!r},{st.att!r},{st.tp},{eps!r}")
        if (ep + 1) % 10 == 0 or ep + 1 == cfg.trainer.episodes:
            agent.save(ckpt)
            curve_path.write_text("episode,reward_mean,att,tp,epsilon\n" + "\n".join(rows) + "\n")
    agent.save(ckpt)
    curve_path.write_text("episode,reward_mean,att,tp,epsilon\n" + "\n".join(rows) + "\n")
    files = [ckpt, ckpt.with_name(ckpt.name + ".target"), ckpt.with_name(ckpt.name + ".meta"), curve_path]
    if log_episodes:
        files.append(out / "episodes" / f"train_seed{seed}.csv")
    return {"seed": seed, "files": [_rel(out, f) for f in files]}


def cmd_train_sim(args) -> int:
    cfg = _load(args)
    seeds = _seeds(args, cfg)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("train-sim", None, cfg.setting, seeds, str(args.config) if args.config else None, str(out),
                           _now())
    results = _map(_train_one, [(cfg, s, out, args.resume, args.log_episodes) for s in seeds], args.jobs)
    for r in results:
        manifest.files += r["files"]
    manifest.write(out)
    log.info("trained %d policies into %s", len(seeds), out)
    return EXIT_OK


# --- transfer ------------------------------------------------------------------------------

def _transfer_one(job) -> dict:
    cfg, seed, mode, out, checkpoint, log_episodes, save_datasets = job
    policy = None
    if checkpoint is not None:
        path = Path(str(checkpoint).replace("{seed}", str(seed)))
        if not path.exists():
            raise FileNotFoundError(f"checkpoint {path} not found")
        policy = DQNAgent.from_config(cfg, seed).load(path)
    log_dir = out / "episodes" / f"{mode}_seed{seed}" if log_episodes else None
    run = run_prompt_gat(cfg, mode, seed=seed, policy=policy, log_dir=log_dir)
    files = []
    if log_dir is not None:
        files += [_rel(out, p) for p in sorted(log_dir.glob("*.csv"))]
    if save_datasets:
        from .gat import save_dataset
        for name, data in (("d_sim", run.d_sim), ("d_real", run.d_real)):
            path = out / f"{name}_{mode}_seed{seed}.jsonl"
            save_dataset(data, path)
            files.append(_rel(out, path))
    return {"seed": seed, "sim": run.sim_stats.as_dict(), "real": run.real_stats.as_dict(),
            "forward_mse": run.forward_mse, "oracle_calls": run.oracle_calls, "files": files}


def cmd_transfer(args) -> int:
    cfg = _load(args)
    mode = normalize_mode(args.mode)
    seeds = _seeds(args, cfg)
    if mode == "prompt_gat":
        make_backend(cfg.oracle)  # fail on oracle misconfiguration before any episode
    if args.checkpoint is not None and "{seed}" not in str(args.checkpoint) and not args.checkpoint.exists():
        raise UsageError(f"checkpoint {args.checkpoint} not found")
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("transfer", mode, cfg.setting, seeds, str(args.config) if args.config else None,
                           str(out), _now())
    jobs = [(cfg, s, mode, out, args.checkpoint, args.log_episodes, args.save_datasets) for s in seeds]
    results = _map(_transfer_one, jobs, args.jobs)
    runs = [(r["seed"], r["sim"], r["real"]) for r in results]
    extra = [{"forward_mse": r["forward_mse"], "oracle_calls": r["oracle_calls"]} for r in results]
    report = aggregate(mode, cfg.setting or "custom", runs, extra)
    csv_path, json_path = write_report([report], out / "report.csv")
    manifest.files += [_rel(out, csv_path), _rel(out, json_path)]
    for r in results:
        manifest.files += r["files"]
    manifest.write(out)
    d = report.delta
    log.info("%s %s: ATT gap %.2f, TP gap %.1f over %d seed(s)", mode, report.setting, d["att"], d["tp"],
             len(seeds))
    return EXIT_OK


# --- compare -------------------------------------------------------------------------------

def _single(reports, path):
    if len(reports) == 0:
        raise UsageError(f"{path}: no reports")
    methods = {r.method for r in reports}
    if len(methods) != 1:
        raise UsageError(f"{path}: expected one method per file, found {sorted(methods)}")
    return {r.setting: r for r in reports}


def cmd_compare(args) -> int:
    if len(args.reports) < 2:
        raise UsageError("compare needs at least two report files")
    loaded = []
    for path in args.reports:
        try:
            loaded.append(_single(read_reports(path), path))
        except (OSError, ValueError, KeyError) as err:
            raise UsageError(f"cannot read report {path}: {err}") from None
    base = loaded[0]
    for other, path in zip(loaded[1:], args.reports[1:]):
        if set(other) != set(base):
            raise UsageError(f"settings differ: {sorted(base)} vs {sorted(other)} ({path})")
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("compare", None, None, [], None, str(out), _now())
    imp_rows, corr_rows, flags = [], [], []
    for other in loaded[1:]:
        a_name = next(iter(base.values())).method
        b_name = next(iter(other.values())).method
        rec = gap_improvement({s: r.delta for s, r in base.items()}, {s: r.delta for s, r in other.items()},
                              a_name, b_name)
        if rec.flag:
            flags.append(f"{a_name} vs {b_name}: {rec.flag}")
        imp_rows += rec.rows()
        columns = {name: [] for name in ("accuracy", *METRICS)}
        for setting in sorted(base):
            pa = {row["seed"]: row for row in base[setting].per_seed}
            pb = {row["seed"]: row for row in other[setting].per_seed}
            for seed in sorted(set(pa) & set(pb)):
                ra, rb = pa[seed], pb[seed]
                columns["accuracy"].append(abs(ra.get("forward_mse", np.nan) - rb.get("forward_mse", np.nan)))
                for m in METRICS:
                    da = ra["real"][m] - ra["sim"][m]
                    db = rb["real"][m] - rb["sim"][m]
                    columns[m].append(abs(da - db))
        if not all(np.isfinite(columns["accuracy"])):
            del columns["accuracy"]
        for row in correlation_matrix(columns):
            corr_rows.append([a_name, b_name, row["x"], row["y"], row["r"], row["p"], row["flag"]])
            if row["flag"]:
                flags.append(f"{a_name} vs {b_name}: {row['x']}/{row['y']}: {row['flag']}")
    with (out / "improvement.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method_a", "method_b", "setting", "metric", "raw", "normalized"])
        for r in imp_rows:
            w.writerow([*r[:4], repr(r[4]), "" if r[5] is None else repr(r[5])])
    with (out / "correlation.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method_a", "method_b", "x", "y", "r", "p", "flag"])
        for r in corr_rows:
            w.writerow([*r[:4], "" if r[4] is None else repr(r[4]), "" if r[5] is None else repr(r[5]), r[6]])
    (out / "flags.txt").write_text("".join(f + "\n" for f in flags))
    manifest.files += ["improvement.csv", "correlation.csv", "flags.txt"]
    manifest.write(out)
    for f in flags:
        log.warning("%s", f)
    return EXIT_OK


# --- simulate ------------------------------------------------------------------------------

def _simulate_one(job) -> dict:
    cfg, seed, cycle = job
    arrivals_seed = episode_seed(seed, "eval", 0)
    sim = run_fixed_time(cfg, cfg.sim_profile, cycle=cycle, seed=arrivals_seed, steps=cfg.trainer.test_steps)
    real = run_fixed_time(cfg, cfg.real_profile, cycle=cycle, seed=arrivals_seed, steps=cfg.trainer.test_steps)
    return {"seed": seed, "sim": sim.as_dict(), "real": real.as_dict()}


def cmd_simulate(args) -> int:
    cfg = _load(args)
    seeds = _seeds(args, cfg)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("simulate", "fixed_time", cfg.setting, seeds, str(args.config) if args.config else None,
                           str(out), _now())
    results = _map(_simulate_one, [(cfg, s, args.cycle) for s in seeds], args.jobs)
    report = aggregate("fixed_time", cfg.setting or "custom", [(r["seed"], r["sim"], r["real"]) for r in results])
    csv_path, json_path = write_report([report], out / "report.csv")
    manifest.files += [_rel(out, csv_path), _rel(out, json_path)]
    manifest.write(out)
    return EXIT_OK


# --- oracle --------------------------------------------------------------------------------

def cmd_oracle(args) -> int:
    cfg = _load(args)
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    ctx = PromptContext(DomainContext(args.weather, args.road), args.count)
    if args.show_prompt:
        print(build_prompt(ctx))
    oracle = DynamicsOracle(make_backend(cfg.oracle))
    est = oracle.query(ctx)
    print(json.dumps(dict(zip(("ac", "ad", "aed", "adl"), est.as_tuple()))))
    return EXIT_OK


COMMANDS = {"train-sim": cmd_train_sim, "transfer": cmd_transfer, "compare": cmd_compare,
            "simulate": cmd_simulate, "oracle": cmd_oracle}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, StatisticsError) as err:
        print(f"groundsim: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (OracleError, FileNotFoundError, RuntimeError, OSError, ValueError) as err:
        print(f"groundsim: runtime failure: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
