"""Command-line surface: toporag {parse|split|train|embed|retrieve|run|eval}.

Settings merge with precedence flags > environment > config file >
defaults. The config file is TOML with sections [paths], [backend],
[budget], [trainer]; the backend API key is only ever read from the
environment variable named by backend.api_key_env (default
TOPORAG_API_KEY).

Exit codes: 0 success, 1 user error (bad usage, bad inputs), 2 internal
error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__
from .agents import (
    BackendPool,
    CaseRunConfig,
    HttpBackend,
    HttpBackendConfig,
    MockBackend,
    MockBackendConfig,
    backend_pool,
    run_case,
)
from .budget import Calibration
from .encoder import encode, load_model, save_model
from .errors import ToporagError
from .evalkit import EvalConfig, run_eval
from .retrieval import (
    assemble_context,
    assemble_no_rag_context,
    build_index,
    load_index,
    retrieve,
    save_index,
)
from .topo import SplitManifest, build_graph, load_topology, make_splits
from .trainer import AugmentConfig, TrainConfig, train
from .util import to_json

USER_ERROR, INTERNAL_ERROR = 1, 2


@dataclass(frozen=True)
class PathSettings:
    corpus: str = ""
    refs: str = ""
    model: str = "model.json"
    knowledge: str = ""
    index: str = "refs.index.json"
    out: str = "out"


@dataclass(frozen=True)
class BackendSettings:
    kind: str = "mock"
    replicas: int = 1
    fault_rate: float = 0.0
    fault_kind: str = "bad_interface"
    require_reference: bool = False
    base_url: str = ""
    model: str = ""
    api_key_env: str = "TOPORAG_API_KEY"
    timeout_s: float = 60.0


@dataclass(frozen=True)
class TrainerSettings:
    tau: float = 0.2
    p_edge: float = 0.2
    p_node: float = 0.1
    batch_size: int = 32
    learning_rate: float = 1e-3
    max_epochs: int = 200
    patience: int = 10


@dataclass(frozen=True)
class RunConfig:
    paths: PathSettings = field(default_factory=PathSettings)
    backend: BackendSettings = field(default_factory=BackendSettings)
    budget: Calibration = field(default_factory=Calibration)
    trainer: TrainerSettings = field(default_factory=TrainerSettings)
    seed: int = 0
    parallelism: int = 1


def _merge_section(cls_instance, section: dict):
    known = {f.name for f in fields(cls_instance)}
    unknown = set(section) - known
    if unknown:
        raise ToporagError(f"unknown config keys: {sorted(unknown)}")
    return replace(cls_instance, **section)


def load_config(path: str | None) -> RunConfig:
    config = RunConfig()
    if not path:
        return config
    raw = tomllib.loads(Path(path).read_text(encoding="utf-8"))
    config = replace(
        config,
        paths=_merge_section(config.paths, raw.get("paths", {})),
        backend=_merge_section(config.backend, raw.get("backend", {})),
        budget=_merge_section(config.budget, raw.get("budget", {})),
        trainer=_merge_section(config.trainer, raw.get("trainer", {})),
    )
    if "seed" in raw:
        config = replace(config, seed=int(raw["seed"]))
    if "parallelism" in raw:
        config = replace(config, parallelism=int(raw["parallelism"]))
    return config


def default_knowledge_path() -> Path:
    return Path(str(resources.files("toporag").joinpath("data/knowledge.txt")))


def make_backends(settings: BackendSettings, seed: int) -> BackendPool:
    if settings.kind == "mock":
        mock_config = MockBackendConfig(
            fault_rate=settings.fault_rate,
            fault_kind=settings.fault_kind,
            seed=seed,
            require_reference=settings.require_reference,
        )
        replicas = [MockBackend(mock_config) for _ in range(settings.replicas)]
    elif settings.kind == "http":
        if not settings.base_url or not settings.model:
            raise ToporagError("http backend needs base_url and model settings")
        http_config = HttpBackendConfig(
            base_url=settings.base_url,
            model=settings.model,
            api_key_env=settings.api_key_env,
            timeout_s=settings.timeout_s,
        )
        replicas = [HttpBackend(http_config) for _ in range(settings.replicas)]
    else:
        raise ToporagError(f"unknown backend kind {settings.kind!r}")
    return backend_pool(replicas)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, not argparse's 2
        self.print_usage(sys.stderr)
        raise SystemExit((USER_ERROR, f"{self.prog}: error: {message}"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="toporag", description=__doc__)
    parser.add_argument("--version", action="version", version=f"toporag {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--out", help="output directory or file (command-specific)")

    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("parse", parents=[common], help="parse a topology and print a summary")
    p.add_argument("topology", help="topology JSON file")

    p = sub.add_parser("split", parents=[common], help="write a split manifest for a corpus")
    p.add_argument("--corpus", help="directory of topology JSON files")
    p.add_argument("--verified", help="file with one verified case id per line")
    p.add_argument("--val", type=int, default=0)
    p.add_argument("--test", type=int, default=0)
    p.add_argument("--reference", type=int, default=0)
    p.add_argument("--query", type=int, default=0)

    p = sub.add_parser("train", parents=[common], help="train the encoder on a corpus split")
    p.add_argument("--corpus", help="directory of topology JSON files")
    p.add_argument("--manifest", help="split manifest JSON")
    p.add_argument("--model", help="output model path (default from config)")

    p = sub.add_parser("embed", parents=[common], help="embed one topology")
    p.add_argument("topology", help="topology JSON file")
    p.add_argument("--model", help="encoder model path")

    p = sub.add_parser("retrieve", parents=[common], help="rank reference cases for a query")
    p.add_argument("topology", help="query topology JSON file")
    p.add_argument("--model", help="encoder model path")
    p.add_argument("--index", help="existing index file")
    p.add_argument("--refs", help="reference directory (<id>/topology.json + driver.py); builds the index")
    p.add_argument("--k", type=int, default=1)

    p = sub.add_parser("run", parents=[common], help="run one case through the loop")
    p.add_argument("--case", required=True, help="target topology JSON file")
    p.add_argument("--model", help="encoder model path")
    p.add_argument("--index", help="reference index file")
    p.add_argument("--refs", help="reference directory; builds the index")
    p.add_argument("--knowledge", help="background knowledge file")
    p.add_argument("--backend", choices=["mock", "http"], help="backend kind")
    p.add_argument("--fault-rate", type=float, dest="fault_rate")
    p.add_argument("--no-toporag", action="store_true", help="disable retrieval grounding")

    p = sub.add_parser("eval", parents=[common], help="evaluate a query set")
    p.add_argument("--queries", help="directory of query topology JSON files")
    p.add_argument("--model", help="encoder model path")
    p.add_argument("--index", help="reference index file")
    p.add_argument("--refs", help="reference directory; builds the index")
    p.add_argument("--knowledge", help="background knowledge file")
    p.add_argument("--backend", choices=["mock", "http"], help="backend kind")
    p.add_argument("--fault-rate", type=float, dest="fault_rate")
    p.add_argument("--require-reference", action="store_true")
    p.add_argument("--no-toporag", action="store_true")
    p.add_argument("--parallelism", type=int)
    return parser


def _settings(args) -> RunConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    backend = config.backend
    for attr, key in (("backend", "kind"), ("fault_rate", "fault_rate")):
        value = getattr(args, attr, None)
        if value is not None:
            backend = replace(backend, **{key: value})
    if getattr(args, "require_reference", False):
        backend = replace(backend, require_reference=True)
    config = replace(config, backend=backend)
    if getattr(args, "parallelism", None):
        config = replace(config, parallelism=args.parallelism)
    return config


def _corpus_graphs(corpus_dir: str, wanted_ids) -> list:
    graphs = []
    for case_id in sorted(wanted_ids):
        doc = load_topology(Path(corpus_dir) / f"{case_id}.json")
        graphs.append(build_graph(doc))
    return graphs


def _reference_cases(refs_dir: str) -> list[dict]:
    cases = []
    for case_dir in sorted(Path(refs_dir).iterdir()):
        if case_dir.is_dir():
            cases.append(
                {
                    "topology_path": str(case_dir / "topology.json"),
                    "driver_path": str(case_dir / "driver.py"),
                }
            )
    return cases


def _load_or_build_index(args, config, model):
    if getattr(args, "refs", None):
        index = build_index(model, _reference_cases(args.refs))
        index_path = _ensure_parent(args.index or config.paths.index)
        save_index(index, index_path)
        return index
    index_path = args.index or config.paths.index
    if not Path(index_path).is_file():
        raise ToporagError(
            f"index file {index_path!r} not found; pass --index or --refs to build one"
        )
    return load_index(index_path)


def _knowledge_path(args, config) -> Path:
    explicit = getattr(args, "knowledge", None) or config.paths.knowledge
    return Path(explicit) if explicit else default_knowledge_path()


def _ensure_parent(path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------- commands


def cmd_parse(args, config: RunConfig) -> int:
    doc = load_topology(args.topology)
    graph = build_graph(doc)
    print(f"nodes={graph.n_nodes} edges={graph.n_edges} max_degree={graph.max_degree}")
    for i, name in enumerate(graph.nodes[:8]):
        row = ",".join(str(int(x)) for x in graph.features[i])
        print(f"  {name} [{row}]")
    if graph.n_nodes > 8:
        print(f"  ... {graph.n_nodes - 8} more")
    return 0


def cmd_split(args, config: RunConfig) -> int:
    corpus_dir = args.corpus or config.paths.corpus
    if not corpus_dir:
        raise ToporagError("split needs --corpus (or paths.corpus in the config)")
    corpus_ids = sorted(p.stem for p in Path(corpus_dir).glob("*.json"))
    verified: set[str] = set()
    if args.verified:
        verified = {
            line.strip() for line in Path(args.verified).read_text(encoding="utf-8").splitlines() if line.strip()
        }
    sizes = {"val": args.val, "test": args.test, "reference": args.reference, "query": args.query}
    manifest = make_splits(corpus_ids, verified, sizes, seed=config.seed)
    out = _ensure_parent(args.out or "splits.json")
    out.write_text(manifest.to_json(), encoding="utf-8")
    print(f"wrote {out} (train={len(manifest.train_ids)} val={len(manifest.val_ids)} "
          f"test={len(manifest.test_ids)} reference={len(manifest.reference_ids)} "
          f"query={len(manifest.query_ids)})")
    return 0


def cmd_train(args, config: RunConfig) -> int:
    corpus_dir = args.corpus or config.paths.corpus
    if not corpus_dir or not args.manifest:
        raise ToporagError("train needs --corpus and --manifest")
    manifest = SplitManifest.from_json(Path(args.manifest).read_text(encoding="utf-8"))
    train_graphs = _corpus_graphs(corpus_dir, manifest.train_ids)
    val_graphs = _corpus_graphs(corpus_dir, manifest.val_ids)
    t = config.trainer
    train_config = TrainConfig(
        tau=t.tau,
        batch_size=t.batch_size,
        learning_rate=t.learning_rate,
        max_epochs=t.max_epochs,
        patience=t.patience,
        seed=config.seed,
    )
    aug = AugmentConfig(p_edge=t.p_edge, p_node=t.p_node, seed=config.seed)
    model_path = _ensure_parent(args.model or config.paths.model)
    log_path = model_path.with_suffix(".log.jsonl")
    epochs = []
    with open(log_path, "w", encoding="utf-8") as log:
        def on_epoch(row):
            epochs.append(row)
            log.write(json.dumps(row, sort_keys=True) + "\n")

        model = train(train_graphs, val_graphs, aug, train_config, on_epoch=on_epoch)
    save_model(model, model_path)
    last = epochs[-1] if epochs else {"train_loss": float("nan"), "val_loss": float("nan")}
    print(f"wrote {model_path} after {len(epochs)} epochs "
          f"(train_loss={last['train_loss']:.4f} val_loss={last['val_loss']:.4f})")
    return 0


def cmd_embed(args, config: RunConfig) -> int:
    model = load_model(args.model or config.paths.model)
    graph = build_graph(load_topology(args.topology))
    emb = encode(model, graph)
    payload = {"case_id": emb.case_id, "embedding": emb.vector.tolist()}
    text = to_json(payload)
    if args.out:
        _ensure_parent(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return 0


def cmd_retrieve(args, config: RunConfig) -> int:
    model = load_model(args.model or config.paths.model)
    index = _load_or_build_index(args, config, model)
    graph = build_graph(load_topology(args.topology))
    for case_id, sim in retrieve(index, graph, model, k=args.k):
        print(f"{case_id}\t{sim:.6f}")
    return 0


def cmd_run(args, config: RunConfig) -> int:
    topo_text = Path(args.case).read_text(encoding="utf-8")
    doc = load_topology(args.case)
    knowledge = _knowledge_path(args, config)
    if args.no_toporag:
        context = assemble_no_rag_context(topo_text, knowledge)
    else:
        model = load_model(args.model or config.paths.model)
        index = _load_or_build_index(args, config, model)
        best = retrieve(index, build_graph(doc), model, k=1)[0]
        context = assemble_context(index, topo_text, best, knowledge)
    backends = make_backends(config.backend, config.seed)
    out_dir = Path(args.out or config.paths.out)
    state = run_case(
        doc.case_id,
        context,
        backends,
        CaseRunConfig(out_dir=out_dir, seed=config.seed, calibration=config.budget),
    )
    print(
        f"{doc.case_id}: {state.phase} after {state.iteration} iteration(s), "
        f"{state.tokens_total} tokens (case dir: {out_dir / doc.case_id})"
    )
    return 0


def cmd_eval(args, config: RunConfig) -> int:
    queries_dir = args.queries or config.paths.corpus
    if not queries_dir:
        raise ToporagError("eval needs --queries (or paths.corpus in the config)")
    query_ids = sorted(p.stem for p in Path(queries_dir).glob("*.json"))
    if not query_ids:
        raise ToporagError(f"no *.json queries found under {queries_dir}")
    knowledge = _knowledge_path(args, config)
    model = index = None
    if not args.no_toporag:
        model = load_model(args.model or config.paths.model)
        index = _load_or_build_index(args, config, model)
    backends = make_backends(config.backend, config.seed)
    out_dir = Path(args.out or config.paths.out)
    eval_config = EvalConfig(
        corpus_dir=Path(queries_dir),
        knowledge_path=knowledge,
        out_dir=out_dir,
        seed=config.seed,
        parallelism=config.parallelism,
        toporag_enabled=not args.no_toporag,
        calibration=config.budget,
    )
    report = run_eval(query_ids, index, model, backends, eval_config)
    rates = " ".join(f"P@{k}={report.pass_at[k]:.3f}" for k in sorted(report.pass_at))
    print(f"evaluated {len(report.records)} cases: {rates} cap_fails={report.cap_fail_count}")
    print(f"wrote {out_dir / 'report.json'}")
    return 0


COMMANDS = {
    "parse": cmd_parse,
    "split": cmd_split,
    "train": cmd_train,
    "embed": cmd_embed,
    "retrieve": cmd_retrieve,
    "run": cmd_run,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = _settings(args)
        return COMMANDS[args.command](args, config)
    except SystemExit as exc:
        if isinstance(exc.code, tuple):  # usage error from _Parser.error
            code, message = exc.code
            print(message, file=sys.stderr)
            return code
        return 0 if exc.code in (0, None) else USER_ERROR
    except ToporagError as exc:
        print(f"toporag: error: {exc}", file=sys.stderr)
        return USER_ERROR
    except (OSError, json.JSONDecodeError) as exc:
        print(f"toporag: error: {exc}", file=sys.stderr)
        return USER_ERROR
    except Exception as exc:  # pragma: no cover - internal bug surface
        print(f"toporag: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return INTERNAL_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
