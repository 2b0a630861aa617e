"""Command-line entry point: gen, train, align, graph, plan, eval and report.

Every command prints a JSON provenance header (tool version, seed, config hash)
as its first stdout line. Exit codes: 0 success, 1 domain failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from multiprocessing import Pool
from pathlib import Path

import numpy as np

from . import __version__
from .align import CorrespondenceError, RegistrationError, correspond
from .depgraph import CircularDependencyError, DependencyGraph, OracleError, threshold_graph
from .graphnet import (
    ModelConfig,
    PositionalEncoder,
    PositionalEncoderConfig,
    Sample,
    TrainConfig,
    TrainingError,
    WeightsFormatError,
    load_weights,
    observation_features,
    predict,
    save_weights,
    train,
)
from .planexec import (
    CIRCULAR,
    COUNT_BUCKETS,
    ActuationNoise,
    GraphModel,
    InvalidPlanError,
    bucketed,
    classical_iterative,
    classical_random,
    count_bucket,
    evaluate,
    execute,
    scl_plan,
)
from .scenegen import (
    DatasetError,
    GenerationError,
    GenSpec,
    ObservationModel,
    Scene,
    load_entry,
    load_manifest,
    make_entry,
    observe,
    save_dataset,
)

log = logging.getLogger("scl")

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2
STEP_ACCOUNTING = "one step per feasibility check or placement; failed checks count"
RETRIES_PER_ENTRY = 20
EMPTY_CELL = "—"


class UsageError(Exception):
    pass


DOMAIN_ERRORS = (GenerationError, DatasetError, CorrespondenceError, RegistrationError, OracleError,
                 CircularDependencyError, TrainingError, WeightsFormatError, InvalidPlanError)


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(_canonical(config).encode()).hexdigest()[:16]


def provenance(command: str, seed, config: dict) -> dict:
    return {"tool": "scl", "version": __version__, "command": command, "seed": seed,
            "config_hash": config_hash(config)}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path, what: str):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{what} {path}: malformed JSON at offset {exc.pos}") from None


def _require_file(path, flag):
    if path is None or not Path(path).is_file():
        raise UsageError(f"{flag}: file not found: {path}")


def _require_dir(path, flag):
    if path is None or not (Path(path) / "manifest.json").is_file():
        raise UsageError(f"{flag}: not a dataset directory (no manifest.json): {path}")


def sub_seed(*parts: int) -> int:
    """Deterministic child seed of integer parts."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def observation_model(cfg: dict) -> ObservationModel:
    views = ObservationModel().views if cfg.get("culling", True) else None
    return ObservationModel(views=views, n_points=int(cfg.get("n_points", 256)),
                            noise_sigma=float(cfg.get("obs_noise", 0.0)))


def entry_observations(entry, model: ObservationModel):
    """Initial and target observations of a dataset entry, seeded by the entry."""
    return (observe(entry.initial, model, sub_seed(entry.seed, 1)),
            observe(entry.target, model, sub_seed(entry.seed, 2)))


def _map(fn, items, jobs: int):
    """Ordered map, optionally over a process pool."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with Pool(jobs) as pool:
        return pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs)))


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def level_range(text: str) -> tuple[int, int]:
    """"3" or "1-3"; entries cycle through the range by index."""
    try:
        parts = [int(v) for v in text.split("-")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected K or K1-K2, got {text!r}") from None
    if len(parts) not in (1, 2) or min(parts) < 1 or parts[0] > parts[-1]:
        raise argparse.ArgumentTypeError(f"expected K or K1-K2 with 1 <= K1 <= K2, got {text!r}")
    return parts[0], parts[-1]


def _gen_one(task):
    index, seed, (kmin, kmax), lo, hi = task
    levels = kmin + index % (kmax - kmin + 1)
    rng = np.random.default_rng(sub_seed(seed, index))
    for attempt in range(RETRIES_PER_ENTRY):
        s = sub_seed(seed, index, attempt)
        if lo is None:
            spec = GenSpec.default(levels, s)
        else:
            spec = GenSpec.sized(int(rng.integers(lo, hi + 1)), levels, s)
        entry = make_entry(index, spec)
        if lo is None or lo <= len(entry.target) <= hi:
            return entry, spec.to_json()
    raise GenerationError(f"scene {index}: no structure with {lo}-{hi} objects after {RETRIES_PER_ENTRY} tries")


def cmd_gen(args, cfg) -> tuple[dict, int]:
    if args.count < 1:
        raise UsageError("--count must be positive")
    if isinstance(args.levels, (int, str)):       # config files give plain values
        try:
            args.levels = level_range(str(args.levels))
        except argparse.ArgumentTypeError as exc:
            raise UsageError(f"--levels: {exc}") from None
    lo, hi = args.min_objects, args.max_objects
    if (lo is None) != (hi is None):
        raise UsageError("--min-objects and --max-objects go together")
    if lo is not None and not args.levels[1] <= lo <= hi:
        raise UsageError("need levels <= --min-objects <= --max-objects")
    tasks = [(k, args.seed, args.levels, lo, hi) for k in range(args.count)]
    results = _map(_gen_one, tasks, args.jobs)
    entries = [e for e, _ in results]
    gen = {"levels": list(args.levels), "min_objects": lo, "max_objects": hi,
           "specs": [s for _, s in results]}
    manifest = save_dataset(entries, args.out, gen)
    return {"count": manifest["count"], "out": str(args.out)}, EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _features_one(task):
    root, meta, cfg = task
    entry = load_entry(root, meta)
    enc = PositionalEncoder(PositionalEncoderConfig(**cfg["encoder"]))
    _, target_obs = entry_observations(entry, observation_model(cfg))
    return observation_features(target_obs, enc), entry.graph.adjacency(), entry.id


def cmd_train(args, cfg) -> tuple[dict, int]:
    _require_dir(args.data, "--data")
    manifest = load_manifest(args.data)
    enc_cfg = PositionalEncoderConfig(subdivisions=args.subdivisions, scale=args.pe_scale)
    feat_cfg = {**cfg, "encoder": enc_cfg.__dict__}
    rows = _map(_features_one, [(args.data, m, feat_cfg) for m in manifest["entries"]], args.jobs)
    samples = [Sample(f, a, i) for f, a, i in rows]
    mcfg = ModelConfig(d_in=samples[0].features.shape[1], seed=args.seed, encoder=enc_cfg)
    tcfg = TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
                       val_fraction=args.val_fraction, tstar=args.tstar)

    def progress(epoch, loss):
        log.info("epoch %d loss %.6f", epoch, loss)

    params, report = train(samples, mcfg, tcfg, max_steps=args.max_steps, progress=progress)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    body = {"train": tcfg.to_json(), "observation": observation_model(cfg).to_json(), "report": report}
    save_weights(out, params, mcfg, {"header": provenance("train", args.seed, cfg), **body})
    return {"out": str(out), **report}, EXIT_OK


# ---------------------------------------------------------------------------
# align / graph / plan
# ---------------------------------------------------------------------------

def _load_scene(path, flag) -> Scene:
    _require_file(path, flag)
    return Scene.from_json(_read_json(Path(path), "scene"))


def _load_model(path):
    _require_file(path, "--model")
    params, mcfg, _ = load_weights(path)
    return GraphModel(params, mcfg)


def cmd_align(args, cfg) -> tuple[dict, int]:
    initial = _load_scene(args.initial, "--initial")
    target = _load_scene(args.target, "--target")
    model = observation_model(cfg)
    cmap = correspond(observe(initial, model, sub_seed(args.seed, 1)), observe(target, model, sub_seed(args.seed, 2)))
    body = cmap.to_json()
    if args.out:
        _write_json(Path(args.out), body)
    return body, EXIT_OK


def cmd_graph(args, cfg) -> tuple[dict, int]:
    target = _load_scene(args.target, "--target")
    gm = _load_model(args.model)
    obs = observe(target, observation_model(cfg), sub_seed(args.seed, 2))
    rho = predict(observation_features(obs, PositionalEncoder(gm.config.encoder)), gm.params, gm.config)
    graph = threshold_graph(rho, args.tstar)
    body = {"graph": graph.to_json(), "rho": np.round(rho, 12).tolist(), "tstar": args.tstar}
    if args.out:
        _write_json(Path(args.out), body)
    return body, EXIT_OK


def cmd_plan(args, cfg) -> tuple[dict, int]:
    initial = _load_scene(args.initial, "--initial")
    target = _load_scene(args.target, "--target")
    if (args.model is None) == (args.graph is None):
        raise UsageError("give exactly one of --model or --graph")
    model = _load_model(args.model) if args.model else None
    graph = None
    if args.graph:
        _require_file(args.graph, "--graph")
        d = _read_json(Path(args.graph), "graph")
        graph = DependencyGraph.from_json(d.get("graph", d))
    om = observation_model(cfg)
    plan = scl_plan(observe(initial, om, sub_seed(args.seed, 1)), observe(target, om, sub_seed(args.seed, 2)),
                    model=model, tstar=args.tstar, graph=graph)
    body = plan.to_json()
    if args.out:
        _write_json(Path(args.out), body)
    if not plan.ok:
        return {**body, "error": plan.failure}, EXIT_DOMAIN
    return body, EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

_MODEL_CACHE: dict = {}


def _eval_one(task):
    root, meta, opts = task
    entry = load_entry(root, meta)
    noise = ActuationNoise(opts["sigma_pos"], opts["sigma_rot"])
    seed = sub_seed(opts["seed"], entry.id)
    initial_obs, target_obs = entry_observations(entry, observation_model(opts["cfg"]))
    if opts["planner"] == "scl":
        model = None
        if opts["model"]:
            if opts["model"] not in _MODEL_CACHE:
                _MODEL_CACHE[opts["model"]] = _load_model(opts["model"])
            model = _MODEL_CACHE[opts["model"]]
        plan = scl_plan(initial_obs, target_obs, model=model, tstar=opts["tstar"],
                        graph=None if model else entry.graph)
        result = execute(plan, entry.initial, entry.target, noise, seed)
    else:
        cmap = correspond(initial_obs, target_obs)
        fn = classical_random if opts["planner"] == "random" else classical_iterative
        result = fn(entry.initial, entry.target, budget=opts["budget"], seed=seed, noise=noise, cmap=cmap)
    levels = max(o.level for o in entry.target.objects) + 1
    return entry.id, levels, result


def cmd_eval(args, cfg) -> tuple[dict, int]:
    _require_dir(args.data, "--data")
    if args.model:
        _require_file(args.model, "--model")
    if args.planner != "scl" and args.model:
        raise UsageError("--model only applies to --planner scl")
    manifest = load_manifest(args.data)
    opts = {"planner": args.planner, "model": args.model, "tstar": args.tstar, "seed": args.seed,
            "sigma_pos": args.sigma_pos, "sigma_rot": args.sigma_rot, "budget": args.budget, "cfg": cfg}
    rows = _map(_eval_one, [(args.data, m, opts) for m in manifest["entries"]], args.jobs)
    rows.sort(key=lambda r: r[0])
    results = [r for _, _, r in rows]
    level_keys = [lv for _, lv, _ in rows]
    count_keys = [count_bucket(r.n) for r in results]
    graph_source = "model" if args.model else "dataset graphs" if args.planner == "scl" else None
    report = {
        "planner": args.planner,
        "graph_source": graph_source,
        "step_accounting": STEP_ACCOUNTING,
        "tstar": args.tstar if args.planner == "scl" else None,
        "noise": {"sigma_pos": args.sigma_pos, "sigma_rot": args.sigma_rot},
        "metrics": evaluate(results),
        "by_objects": bucketed(results, count_keys, [name for name, _, _ in COUNT_BUCKETS]),
        "by_levels": bucketed(results, level_keys, sorted(set(level_keys))),
        "scenes": [{"id": i, "levels": lv, **r.to_json()} for (i, lv, r) in rows],
    }
    circular = [i for i, _, r in rows if r.circular]
    out = {"header": provenance("eval", args.seed, cfg), "report": report}
    if args.report:
        _write_json(Path(args.report), out)
    if circular:
        return {**out, "error": f"{CIRCULAR} in scenes {circular}"}, EXIT_DOMAIN
    return out, EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

REPORT_COLUMNS = (("success", "success_rate", 100.0), ("completion", "completion", 100.0),
                  ("step_ratio", "step_ratio", 1.0), ("pos_error", "pos_error", 1.0),
                  ("orn_error", "orn_error", 1.0))


def _cell(metrics, key, scale) -> str:
    if metrics is None:
        return EMPTY_CELL
    v = metrics[key]
    if isinstance(v, dict):
        if v["mean"] is None:
            return EMPTY_CELL
        return f"{v['mean'] * scale:.4g} ± {v['std'] * scale:.2g}"
    return f"{v * scale:.1f}"


def _validate_report(doc, path):
    try:
        rep = doc["report"]
        for key in ("planner", "metrics", "by_objects", "by_levels"):
            rep[key]
        for col in REPORT_COLUMNS:
            rep["metrics"][col[1]]
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"report {path}: schema mismatch, missing {exc}") from None
    return rep


def _bucket_order(key: str) -> int:
    """Buckets are labels like "3" or "8-10"; order by their lower bound."""
    return int(str(key).split("-")[0])


def render_tables(reports: list, fmt: str = "text") -> str:
    """Planner table, then one table per object-count and level bucket family."""
    head = ["group"] + [c[0] for c in REPORT_COLUMNS]
    tables = [("planner", [(r["planner"], r["metrics"]) for r in reports])]
    for family, title in (("by_objects", "objects"), ("by_levels", "levels")):
        rows = []
        for r in reports:
            for bucket, m in sorted(r[family].items(), key=lambda kv: _bucket_order(kv[0])):
                label = f"{r['planner']} {title}={bucket}" if len(reports) > 1 else f"{title}={bucket}"
                rows.append((label, m))
        tables.append((title, rows))
    out = []
    for title, rows in tables:
        body = [[label] + [_cell(m, key, scale) for _, key, scale in REPORT_COLUMNS] for label, m in rows]
        if fmt == "csv":
            out.append("\n".join(",".join(r) for r in [[f"# {title}"], head] + body))
            continue
        widths = [max(len(r[k]) for r in [head] + body) for k in range(len(head))]
        lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [head] + body]
        lines.insert(1, "-+-".join("-" * w for w in widths))
        out.append(f"[{title}]\n" + "\n".join(lines))
    return "\n\n".join(out) + "\n"


def cmd_report(args, cfg) -> tuple[dict, int]:
    reports = []
    for path in args.reports:
        _require_file(path, "report")
        reports.append(_validate_report(_read_json(Path(path), "report"), path))
    text = render_tables(reports, args.format)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    return {"text": text}, EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scl", description="Multi-level rearrangement planning with learned dependency graphs.")
    p.add_argument("--version", action="version", version=f"scl {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed_required=False):
        sp.add_argument("--seed", type=int, default=None,
                        help="random seed (falls back to $SCL_SEED)" + ("; required" if seed_required else ""))
        sp.add_argument("--config", default=None, help="JSON file of defaults; explicit flags win")
        sp.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes")
        sp.add_argument("--no-culling", dest="culling", action="store_false",
                        help="observe complete surfaces instead of three-view culling")
        sp.add_argument("--n-points", type=int, default=256, help="surface samples per object")
        sp.add_argument("--obs-noise", type=float, default=0.0, help="point noise std, meters")
        sp.add_argument("-v", "--verbose", action="store_true")
        sp.set_defaults(seed_required=seed_required)

    g = sub.add_parser("gen", help="generate a dataset of target/initial/graph triples")
    common(g, True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--levels", type=level_range, default=(3, 3), help="K or a range K1-K2 cycled over entries")
    g.add_argument("--min-objects", type=int, default=None)
    g.add_argument("--max-objects", type=int, default=None)

    t = sub.add_parser("train", help="fit the graph encoder and edge decoder")
    common(t, True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--val-fraction", type=float, default=0.1)
    t.add_argument("--max-steps", type=int, default=None)
    t.add_argument("--subdivisions", type=int, default=2, help="icosphere subdivisions of the encoder")
    t.add_argument("--pe-scale", type=float, default=1.0, help="position scale before encoding")
    t.add_argument("--tstar", type=float, default=0.5)

    a = sub.add_parser("align", help="object correspondences and transforms between two scenes")
    common(a)
    a.add_argument("--initial", required=True)
    a.add_argument("--target", required=True)
    a.add_argument("--out", default=None)

    gr = sub.add_parser("graph", help="predict the dependency graph of a target scene")
    common(gr)
    gr.add_argument("--target", required=True)
    gr.add_argument("--model", required=True)
    gr.add_argument("--tstar", type=float, default=0.5)
    gr.add_argument("--out", default=None)

    pl = sub.add_parser("plan", help="hierarchical plan from initial to target scene")
    common(pl)
    pl.add_argument("--initial", required=True)
    pl.add_argument("--target", required=True)
    pl.add_argument("--model", default=None)
    pl.add_argument("--graph", default=None, help="dependency graph JSON used instead of a model")
    pl.add_argument("--tstar", type=float, default=0.5)
    pl.add_argument("--out", default=None)

    e = sub.add_parser("eval", help="plan and execute every scene of a dataset")
    common(e, True)
    e.add_argument("--data", required=True)
    e.add_argument("--planner", choices=("scl", "random", "iterative"), default="scl")
    e.add_argument("--model", default=None, help="weights; without it scl uses the dataset graphs")
    e.add_argument("--tstar", type=float, default=0.5)
    e.add_argument("--budget", type=int, default=None, help="baseline step budget (default 2N)")
    e.add_argument("--sigma-pos", type=float, default=0.0)
    e.add_argument("--sigma-rot", type=float, default=0.0)
    e.add_argument("--report", default=None)

    r = sub.add_parser("report", help="render evaluation reports as tables")
    r.add_argument("reports", nargs="+")
    r.add_argument("--format", choices=("text", "csv"), default="text")
    r.add_argument("--out", default=None)
    r.add_argument("--config", default=None)
    r.add_argument("-v", "--verbose", action="store_true")
    r.set_defaults(seed_required=False, seed=None, jobs=1)
    return p


CONFIG_KEYS = ("culling", "n_points", "obs_noise")


def _config_values(argv) -> dict:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    path = pre.parse_known_args(argv)[0].config
    if path is None:
        return {}
    _require_file(path, "--config")
    try:
        values = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config {path}: malformed JSON at offset {exc.pos}") from None
    if not isinstance(values, dict):
        raise UsageError(f"--config {path}: expected a JSON object")
    return values


def parse_args(argv):
    """Config-file values become subcommand defaults; explicit flags override them."""
    values = _config_values(argv)
    parser = build_parser()
    if values:
        command = next((a for a in argv if a in COMMANDS), None)
        if command is not None:
            sub = parser._subparsers._group_actions[0].choices[command]
            actions = {a.dest: a for a in sub._actions}
            unknown = sorted(set(values) - set(actions) - {"command"})
            if unknown:
                raise UsageError(f"--config: unknown keys {unknown}")
            for key, value in values.items():
                if key in actions:
                    actions[key].required = False
            sub.set_defaults(**values)
    args = parser.parse_args(argv)
    if args.seed is None and os.environ.get("SCL_SEED") is not None:
        try:
            args.seed = int(os.environ["SCL_SEED"])
        except ValueError:
            raise UsageError("SCL_SEED must be an integer") from None
    if args.seed is None:
        if args.seed_required:
            raise UsageError(f"{args.command}: --seed (or SCL_SEED) is required")
        args.seed = 0
    if getattr(args, "jobs", 1) < 1:
        raise UsageError("--jobs must be at least 1")
    return args


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "align": cmd_align, "graph": cmd_graph, "plan": cmd_plan,
            "eval": cmd_eval, "report": cmd_report}

def render_body(command: str, body: dict) -> str:
    """Stdout after the header: tables for report, metrics for eval, JSON otherwise."""
    if command == "report":
        return body["text"]
    if command == "eval":
        return _canonical(body["report"]["metrics"]) + "\n"
    return json.dumps({k: v for k, v in body.items() if k != "error"}, sort_keys=True) + "\n"


# flags that change no output content (parallelism, logging, destinations) stay out of the config hash
_NEUTRAL = {"jobs", "verbose", "config", "seed_required", "command", "out", "report"}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"scl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    cfg = {k: v for k, v in vars(args).items() if k not in _NEUTRAL}
    header = provenance(args.command, args.seed, cfg)
    print(_canonical(header))
    try:
        body, code = COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"scl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DOMAIN_ERRORS as exc:
        print(f"scl: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    print(render_body(args.command, body), end="")
    if "error" in body:
        print(f"scl: {body['error']}", file=sys.stderr)
    return code

if __name__ == "__main__":
    sys.exit(main())
