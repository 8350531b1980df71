"""Command-line entry point: dataset, train, descriptors and play subcommands.

Exit codes: 0 success, 1 usage error, 2 data error, 3 divergence or abort.
"""

from __future__ import annotations

import argparse
import json
import pickle
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import CONFIG_ENV, config_hash, contact_params, es_preset, flight_params, load_config, table_geometry
from .dataset import (
    Dataset,
    STATS_COLUMNS,
    fit_initial_state,
    load_dataset,
    load_raw_trajectory,
    reflect_rally,
    save_dataset,
    segment_trajectories,
    summary_table,
    synth_dataset,
)
from .descriptors import build_all, format_report, load_table, report, save_table
from .errors import DivergenceError, FitFailedError, MissingArtifactError, TTAgentError
from .hlc import (
    HlcConfig,
    StyleModel,
    generalist_pair,
    style_land_rate,
    style_outcomes,
    synth_serve_motion,
    train_spin_classifier,
    train_style_model,
)
from .matchsim import (
    ALTERNATING,
    MAIN,
    RANDOM_SELECT,
    HLC_SELECT,
    LatencyModel,
    RobotStack,
    ablate_decision_timing,
    default_profiles,
    exploit_profile,
    format_rows,
    never_returns_profile,
    run_match,
    tournament,
    write_event_log,
)
from .skills import (
    FOREHAND,
    BACKHAND,
    RewardConfig,
    SkillEnv,
    build_skills,
    load_policy,
    policy_spec,
    save_policy,
    topspin_correct,
    train_policy_skill,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ABORT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _overrides(pairs):
    """``section.key=value`` pairs into a nested dict; values parsed as JSON when possible."""
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise UsageError(f"override must look like section.key=value (got {p!r})")
        key, raw = p.split("=", 1)
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        node = out
        parts = key.split(".")
        for k in parts[:-1]:
            node = node.setdefault(k, {})
        node[parts[-1]] = val
    return out


def _env(cfg):
    return SkillEnv.from_config(cfg, flight_params(cfg), contact_params(cfg), table_geometry(cfg))


def _stamp(cfg, seed):
    return {"config_hash": config_hash(cfg), "seed": seed}


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _emit(text, out=None):
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    else:
        print(text)


# ------------------------------------------------------------------ dataset


def _fit_files(paths, cfg, rng):
    flight, contact, table = flight_params(cfg), contact_params(cfg), table_geometry(cfg)
    fitted = []
    for p in paths:
        stream = load_raw_trajectory(p)
        for seg in segment_trajectories(stream):
            state, res = fit_initial_state(seg, flight, contact, table, rng=rng,
                                           residual_ceiling=cfg["dataset"]["fit_residual_ceiling"])
            fitted.append((p, state, res))
    return fitted


def cmd_dataset(args, cfg):
    rng = np.random.default_rng(args.seed)
    stamp = _stamp(cfg, args.seed)
    if args.action == "import":
        fitted = _fit_files(args.inputs, cfg, rng)
        if not fitted:
            raise MissingArtifactError("no trajectories found in the input")
        ds = Dataset()
        for _, state, _ in fitted:
            ds.add_state(state, is_serve=args.serves)
        save_dataset(ds, args.out, stamp)
        print(f"imported {len(ds)} balls into {args.out}")
    elif args.action == "fit":
        fitted = _fit_files(args.inputs, cfg, rng)
        if not fitted:
            raise MissingArtifactError("no trajectories found in the input")
        lines = ["source,index,x,y,z,vx,vy,vz,wx,wy,wz,residual"]
        for i, (src, s, res) in enumerate(fitted):
            vals = ",".join(repr(float(v)) for v in s.to_array())
            lines.append(f"{src},{i},{vals},{res!r}")
        res = np.array([f[2] for f in fitted])
        lines.append(f"# median_residual={float(np.median(res))!r} seed={args.seed} config_hash={stamp['config_hash']}")
        _emit("\n".join(lines), args.out)
    elif args.action == "reflect":
        ds = load_dataset(args.inputs[0])
        out = reflect_rally(ds, flight=flight_params(cfg), contact=contact_params(cfg), table=table_geometry(cfg))
        save_dataset(out, args.out, stamp)
        print(f"reflected {len(ds)} -> {len(out)} records")
    elif args.action == "stats":
        ds = load_dataset(args.inputs[0])
        rows = summary_table(ds)
        lines = ["\t".join(("Dataset type", "Dataset") + STATS_COLUMNS)]
        lines += ["\t".join(str(c) for c in r) for r in rows]
        _emit("\n".join(lines), args.out)
    elif args.action == "synth":
        ds = synth_dataset(args.rally, args.serve_count, rng)
        save_dataset(ds, args.out, stamp)
        print(f"wrote {len(ds)} synthetic balls to {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------ train


def _need(path, stage):
    if path is None or not Path(path).exists():
        raise MissingArtifactError(f"missing {stage} artifact: {path}")
    return path


def cmd_train(args, cfg):
    rng = np.random.default_rng(args.seed)
    stamp = _stamp(cfg, args.seed)
    env = _env(cfg)
    curve = []
    if args.what == "skill":
        ds = load_dataset(_need(args.dataset, "dataset"))
        spec = policy_spec(args.style)
        es = es_preset(cfg, args.preset)
        try:
            skill = train_policy_skill(ds, es, RewardConfig(), rng, args.iterations, spec=spec, curve=curve)
        except DivergenceError as exc:
            _keep_checkpoint(args.out, exc)
            raise
        save_policy(skill, args.out, stamp)
    elif args.what == "film":
        ds = load_dataset(_need(args.dataset, "dataset"))
        base = load_policy(_need(args.policy, "policy"), policy_spec(args.style))
        try:
            skill = topspin_correct(base, ds, env=env, rng=rng, adapter_iterations=args.iterations)
        except DivergenceError as exc:
            _keep_checkpoint(args.out, exc)
            raise
        save_policy(skill, args.out, stamp)
    elif args.what == "style":
        ds = load_dataset(_need(args.dataset, "dataset"))
        balls = [r.initial for r in ds.rally()]
        if len(balls) < 4:
            raise MissingArtifactError("style training needs at least 4 rally balls")
        cut = len(balls) * 3 // 4
        fh, bh = generalist_pair(build_skills())
        train = style_outcomes(balls[:cut], fh, bh, env, seed=args.seed)
        val = style_outcomes(balls[cut:], fh, bh, env, seed=args.seed + 1)
        model = train_style_model(train, val, rng=rng, iterations=args.iterations, env=env)
        result = {"weights": [float(w) for w in model.weights], **stamp,
                  "validation_land_rate": style_land_rate(model.weights, *val),
                  "heuristic_land_rate": style_land_rate(StyleModel.HEURISTIC, *val)}
        _write_json(args.out, result)
    elif args.what == "spin":
        labels = rng.random(args.count) < 0.35
        motions = [synth_serve_motion(rng, bool(u)) for u in labels]
        clf = train_spin_classifier(motions, labels, seed=args.seed)
        with open(args.out, "wb") as fh:
            pickle.dump({"classifier": clf, **stamp}, fh)
        curve.append(("metrics", clf.metrics))
        print(json.dumps(clf.metrics, sort_keys=True))
    if curve:
        with open(str(args.out) + ".curve.tsv", "w") as fh:
            fh.write(f"# seed={args.seed} config_hash={stamp['config_hash']}\n")
            for row in curve:
                fh.write("\t".join(str(x) for x in row) + "\n")
    print(f"wrote {args.out}")
    return EXIT_OK


def _keep_checkpoint(out, exc):
    if exc.checkpoint is not None:
        np.savetxt(str(out) + ".checkpoint", np.asarray(exc.checkpoint).reshape(-1))


# ------------------------------------------------------------------ descriptors


def cmd_descriptors(args, cfg):
    if args.action == "build":
        ds = load_dataset(_need(args.dataset, "dataset"))
        skills = build_skills()
        tables = build_all(skills, ds, args.repetitions, _env(cfg), args.seed)
        out = Path(args.dir)
        out.mkdir(parents=True, exist_ok=True)
        for sid, t in tables.items():
            save_table(t, out / f"skill_{sid:02d}.csv")
        _write_json(out / "manifest.json", {"skills": sorted(tables), "repetitions": args.repetitions,
                                            **_stamp(cfg, args.seed)})
        print(f"built {len(tables)} descriptor tables in {out}")
    else:
        tables = _load_tables(args.dir)
        names = {s.spec.id: s.spec.name for s in build_skills()}
        _emit(format_report(report(tables, names)), args.out)
    return EXIT_OK


def _load_tables(directory):
    d = Path(directory) if directory else None
    if d is None or not (d / "manifest.json").exists():
        raise MissingArtifactError(f"missing descriptors stage: no manifest in {directory}")
    tables = {}
    for f in sorted(d.glob("skill_*.csv")):
        t = load_table(f)
        tables[t.skill_id] = t
    return tables


# ------------------------------------------------------------------ play


def _stack(args, cfg, selection=HLC_SELECT):
    env = _env(cfg)
    tables = _load_tables(args.descriptors)
    style = None
    if args.style_model:
        with open(_need(args.style_model, "style model")) as fh:
            style = StyleModel(json.load(fh)["weights"], env=env)
    clf = None
    if args.spin_model:
        with open(_need(args.spin_model, "spin classifier"), "rb") as fh:
            clf = pickle.load(fh)["classifier"]
    return RobotStack(build_skills(), tables, style, clf, env, HlcConfig.from_config(cfg),
                      LatencyModel.from_config(cfg) if args.latency else None, selection)


def _profile(name):
    profiles = default_profiles()
    if name in profiles:
        return profiles[name]
    if name == "exploit":
        return exploit_profile()
    if name == "wall":
        return never_returns_profile()
    raise MissingArtifactError(f"unknown opponent profile {name!r}")


def cmd_play(args, cfg):
    stamp = _stamp(cfg, args.seed)
    variant = args.variant or cfg["match"]["variant"]
    stack = _stack(args, cfg, RANDOM_SELECT if getattr(args, "random", False) else HLC_SELECT)
    if args.action == "match":
        log = []
        rep = run_match(stack, _profile(args.profile), np.random.default_rng(args.seed), variant, cfg=cfg, log=log)
        if args.log:
            write_event_log(log, args.log)
        out = {**rep.to_dict(), **stamp}
        out.pop("shots")
        if args.out:
            _write_json(args.out, out)
        print(f"games {rep.game_scores} (human, robot); games won {rep.games_won}; points {rep.points_won}")
    elif args.action == "tournament":
        names = args.profiles or list(default_profiles())
        rows = tournament(stack, {n: _profile(n) for n in names}, args.matches, args.seed, variant, cfg)
        for r in rows:
            r.update(stamp)
        _emit(format_rows(rows, ["profile", "matches", "match_win_pct", "game_win_pct", "point_win_pct", "seed",
                                 "config_hash"]), args.out)
    else:
        from .dataset import synth_incoming

        rng = np.random.default_rng(args.seed)
        balls = [synth_incoming(rng) for _ in range(args.balls)]
        rows = ablate_decision_timing(stack, balls, seed=args.seed)
        for r in rows:
            r.update(stamp)
        _emit(format_rows(rows, ["setting", "n", "hit", "land", "miss", "reference_land", "seed", "config_hash"]),
              args.out)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser():
    p = _Parser(prog="ttagent", description="Desk-scale table-tennis agent pipeline.")
    p.add_argument("--version", action="version", version=f"ttagent {__version__}")
    p.add_argument("--config", help=f"YAML configuration (default: ${CONFIG_ENV})")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="configuration override")
    p.add_argument("--seed", type=int, default=None, help="random seed (default: config seed)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("dataset", help="import, fit, reflect, summarize or synthesize ball datasets")
    d.add_argument("action", choices=("import", "fit", "reflect", "stats", "synth"))
    d.add_argument("inputs", nargs="*", help="raw trajectory files, or one dataset file")
    d.add_argument("--out", help="output path")
    d.add_argument("--serves", action="store_true", help="imported balls are serves")
    d.add_argument("--rally", type=int, default=200, help="synth: rally balls")
    d.add_argument("--serve-count", type=int, default=60, help="synth: serves")
    d.set_defaults(func=cmd_dataset)

    t = sub.add_parser("train", help="train a skill policy, FiLM adapter, style model or spin classifier")
    t.add_argument("what", choices=("skill", "style", "spin", "film"))
    t.add_argument("--dataset")
    t.add_argument("--policy", help="film: base policy file")
    t.add_argument("--style", choices=(FOREHAND, BACKHAND), default=FOREHAND)
    t.add_argument("--preset", default="simulation", help="optimizer preset")
    t.add_argument("--iterations", type=int, default=20)
    t.add_argument("--count", type=int, default=300, help="spin: synthetic serves")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("descriptors", help="build or report skill descriptor tables")
    r.add_argument("action", choices=("build", "report"))
    r.add_argument("--dataset")
    r.add_argument("--dir", required=True, help="descriptor directory")
    r.add_argument("--repetitions", type=int, default=10)
    r.add_argument("--out")
    r.set_defaults(func=cmd_descriptors)

    g = sub.add_parser("play", help="run matches, tournaments or decision-timing ablations")
    g.add_argument("action", choices=("match", "tournament", "ablate"))
    g.add_argument("--descriptors", required=True, help="descriptor directory")
    g.add_argument("--style-model")
    g.add_argument("--spin-model")
    g.add_argument("--profile", default="Intermediate")
    g.add_argument("--profiles", nargs="*")
    g.add_argument("--variant", choices=(MAIN, ALTERNATING))
    g.add_argument("--matches", type=int, default=3)
    g.add_argument("--balls", type=int, default=100, help="ablate: evaluation corpus size")
    g.add_argument("--random", action="store_true", help="uniform-random skill selection")
    g.add_argument("--latency", action="store_true", help="inject sampled sensor and action delays")
    g.add_argument("--log", help="event log (JSON lines)")
    g.add_argument("--out")
    g.set_defaults(func=cmd_play)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config, _overrides(args.set))
        if args.seed is None:
            args.seed = int(cfg["seed"])
        if getattr(args, "out", None) is None and args.command == "dataset" and args.action in ("import", "reflect", "synth"):
            raise UsageError(f"dataset {args.action} needs --out")
        if args.command == "dataset" and args.action in ("import", "fit", "reflect", "stats") and not args.inputs:
            raise UsageError(f"dataset {args.action} needs an input file")
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"ttagent: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, FitFailedError) as exc:
        print(f"ttagent: aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (TTAgentError, OSError, ValueError, KeyError) as exc:
        print(f"ttagent: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
