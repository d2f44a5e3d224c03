"""Batch command line: ``urbanflow [options] <stage>``.

Stages read their inputs from the data directory or from earlier stages'
outputs in the output directory, write their artifact plus a JSON run
manifest, and exit non-zero with a machine-readable error report on failure.

Configuration is an INI file whose sections mirror the stage configs.
Values are overridden by ``URBANFLOW_<SECTION>__<KEY>`` environment
variables and then by ``--set section.key=value`` flags.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .community import DetectConfig, detect_hierarchy, read_partition_csv, write_partition_csv
from .embedding import TrainConfig, build_vocab, load_embeddings, save_embeddings, train
from .errors import MissingInput, UrbanflowError
from .evaluation import evaluate, read_od_trips, read_pois, write_flow_matrix
from .relatedness import (assign_weights, read_arc_weights, similarity_distance_profile, write_arc_weights,
                          write_profile)
from .road_graph import load_road_network, simplify
from .synth import SynthConfig, generate, write_city
from .trajectory import build_corpus, extract_trips, read_corpus, read_gps_csv, write_corpus

log = logging.getLogger("urbanflow")

ENV_PREFIX = "URBANFLOW_"
STAGES = ("synth", "ingest", "train", "weigh", "detect", "evaluate", "profile", "pipeline")
PIPELINE = ("ingest", "train", "weigh", "detect", "evaluate")

DEFAULTS = {
    "run": {"seed": "0", "threads": "1", "data_dir": "data", "out_dir": "out"},
    "paths": {"nodes": "", "edges": "", "trajectories": "", "pois": "", "trips": "", "corpus": ""},
    "ingest": {"radius_m": "100", "max_gap_s": "300", "simplify": "true"},
    "train": {"dimension": "128", "window": "10", "epochs": "10", "negative": "5", "alpha": "0.025",
              "min_alpha": "0.0001", "min_count": "1", "mode": "negative"},
    "weigh": {"floor": "1e-6"},
    "detect": {"tau": "0.15", "seed": "", "max_levels": "3", "min_module_size": "5", "tolerance": "1e-12",
               "max_iter": "10000", "weight_mode": "relatedness", "trials": "10"},
    "evaluate": {"index_level": "", "flow_level": "", "cell_m": "50", "top_k": "3", "min_region_pois": "5",
                 "paf_mode": "global"},
    "profile": {"sample_fraction": "0.1", "bin_width_m": "100"},
    "synth": {f.name: str(f.default) for f in dataclasses.fields(SynthConfig) if f.name != "seed"},
}

OUTPUTS = {
    "ingest": ("corpus.txt", "ingest_stats.json"),
    "train": ("embeddings.txt",),
    "weigh": ("arc_weights.csv", "weigh_report.json"),
    "detect": ("partition.csv", "detect_summary.json"),
    "evaluate": ("report.json", "flow_matrix.csv"),
    "profile": ("profile.csv",),
}


class PipelineConfig:
    """Resolved configuration with typed accessors and path helpers."""

    def __init__(self, parser: configparser.ConfigParser):
        self.parser = parser

    @classmethod
    def load(cls, path=None, overrides=(), environ=None):
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_dict(DEFAULTS)
        if path is not None:
            if not Path(path).is_file():
                raise MissingInput(f"config file {path} not found")
            cp.read(path, encoding="utf-8")
        environ = os.environ if environ is None else environ
        for key, value in sorted(environ.items()):
            if key.startswith(ENV_PREFIX) and "__" in key:
                section, option = key[len(ENV_PREFIX):].lower().split("__", 1)
                cls._put(cp, section, option, value)
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ValueError(f"--set expects section.key=value, got {item!r}")
            lhs, value = item.split("=", 1)
            section, option = lhs.strip().split(".", 1)
            cls._put(cp, section.lower(), option.lower(), value.strip())
        return cls(cp)

    @staticmethod
    def _put(cp, section, option, value):
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, option, value)

    def get(self, section, key, fallback=None):
        return self.parser.get(section, key, fallback=fallback)

    def getint(self, section, key):
        return self.parser.getint(section, key)

    def getfloat(self, section, key):
        return self.parser.getfloat(section, key)

    def optional_int(self, section, key):
        raw = self.get(section, key, "")
        return int(raw) if raw not in ("", None) else None

    @property
    def seed(self) -> int:
        return self.getint("run", "seed")

    @property
    def threads(self) -> int:
        return self.getint("run", "threads")

    @property
    def data_dir(self) -> Path:
        return Path(self.get("run", "data_dir"))

    @property
    def out_dir(self) -> Path:
        return Path(self.get("run", "out_dir"))

    def input_path(self, key, default_name) -> Path:
        raw = self.get("paths", key, "")
        return Path(raw) if raw else self.data_dir / default_name

    def output(self, name) -> Path:
        return self.out_dir / name

    def section(self, name) -> dict:
        return dict(self.parser.items(name)) if self.parser.has_section(name) else {}

    def digest(self) -> str:
        blob = json.dumps({s: self.section(s) for s in sorted(self.parser.sections())}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            dimension=self.getint("train", "dimension"),
            window=self.getint("train", "window"),
            epochs=self.getint("train", "epochs"),
            negative=self.getint("train", "negative"),
            alpha=self.getfloat("train", "alpha"),
            min_alpha=self.getfloat("train", "min_alpha"),
            seed=derive_seed(self.seed, "train"),
            threads=self.threads,
            mode=self.get("train", "mode"),
        )

    def detect_config(self) -> DetectConfig:
        seed = self.optional_int("detect", "seed")
        return DetectConfig(
            tau=self.getfloat("detect", "tau"),
            seed=derive_seed(self.seed, "detect") if seed is None else seed,
            max_levels=self.getint("detect", "max_levels"),
            min_module_size=self.getint("detect", "min_module_size"),
            tolerance=self.getfloat("detect", "tolerance"),
            max_iter=self.getint("detect", "max_iter"),
            weight_mode=self.get("detect", "weight_mode"),
            trials=self.getint("detect", "trials"),
        )

    def synth_config(self) -> SynthConfig:
        kwargs = {}
        for f in dataclasses.fields(SynthConfig):
            if f.name == "seed":
                continue
            raw = self.get("synth", f.name)
            kwargs[f.name] = type(f.default)(float(raw)) if isinstance(f.default, int) else type(f.default)(raw)
        return SynthConfig(seed=derive_seed(self.seed, "synth"), **kwargs)


def derive_seed(root: int, stream: str) -> int:
    """Independent per-stage seed: adding a stage never shifts another's stream."""
    digest = hashlib.sha256(f"{int(root)}:{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(*paths):
    for p in paths:
        if not Path(p).is_file():
            raise MissingInput(f"required input {p} does not exist")


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(cfg, stage, inputs, outputs, seed, started):
    manifest = {
        "stage": stage,
        "version": __version__,
        "config_sha256": cfg.digest(),
        "seed": seed,
        "inputs": {str(p): file_digest(p) for p in inputs},
        "outputs": {str(p): file_digest(p) for p in outputs},
        "seconds": round(time.perf_counter() - started, 3),
    }
    _write_json(manifest, cfg.output(f"{stage}.manifest.json"))
    return manifest


def stale_inputs(cfg: PipelineConfig, stage) -> list[str]:
    """Inputs of ``stage`` whose content differs from what produced its last outputs."""
    path = cfg.output(f"{stage}.manifest.json")
    if not path.is_file():
        return []
    recorded = json.loads(path.read_text())["inputs"]
    return [p for p, digest in recorded.items() if not Path(p).is_file() or file_digest(p) != digest]


def _graph(cfg):
    nodes, edges = cfg.input_path("nodes", "nodes.csv"), cfg.input_path("edges", "edges.csv")
    _require(nodes, edges)
    g = load_road_network(nodes, edges)
    if cfg.get("ingest", "simplify").lower() in ("1", "true", "yes"):
        g, report = simplify(g)
        if report.self_loops or report.merged_duplicates or report.isolated_nodes:
            log.info("simplify: %s", report.as_dict())
    return g, [nodes, edges]


# --- stages ---

def stage_synth(cfg):
    scfg = cfg.synth_config()
    city = generate(scfg)
    files = write_city(city, cfg.data_dir)
    return [], list(files.values()), scfg.seed


def stage_ingest(cfg):
    g, inputs = _graph(cfg)
    traj = cfg.input_path("trajectories", "trajectories.csv")
    _require(traj)
    records, bad = read_gps_csv(traj)
    trips = extract_trips(records, cfg.getfloat("ingest", "max_gap_s"))
    corpus, stats = build_corpus(g, trips, cfg.getfloat("ingest", "radius_m"))
    stats.malformed_rows = bad
    out_corpus, out_stats = cfg.output("corpus.txt"), cfg.output("ingest_stats.json")
    write_corpus(corpus, out_corpus)
    _write_json(stats.as_dict(), out_stats)
    return inputs + [traj], [out_corpus, out_stats], None


def stage_train(cfg):
    raw = cfg.get("paths", "corpus", "")
    corpus_path = Path(raw) if raw else cfg.output("corpus.txt")
    _require(corpus_path)
    corpus = read_corpus(corpus_path)
    tcfg = cfg.train_config()
    vocab = build_vocab(corpus, cfg.getint("train", "min_count"))
    table = train(corpus, vocab, tcfg)
    out = cfg.output("embeddings.txt")
    save_embeddings(table, out)
    _write_json({"loss_trace": table.loss_trace, "vocabulary": len(vocab), "dimension": table.dimension},
                cfg.output("train_stats.json"))
    return [corpus_path], [out, cfg.output("train_stats.json")], tcfg.seed


def stage_weigh(cfg):
    g, inputs = _graph(cfg)
    emb = cfg.output("embeddings.txt")
    _require(emb)
    table = load_embeddings(emb)
    report = assign_weights(g, table, cfg.getfloat("weigh", "floor"))
    out_w, out_r = cfg.output("arc_weights.csv"), cfg.output("weigh_report.json")
    write_arc_weights(g, out_w)
    _write_json(report.as_dict(), out_r)
    return inputs + [emb], [out_w, out_r], None


def stage_detect(cfg):
    g, inputs = _graph(cfg)
    dcfg = cfg.detect_config()
    weights = cfg.output("arc_weights.csv")
    if dcfg.weight_mode == "relatedness":
        _require(weights)
        read_arc_weights(g, weights)
        inputs = inputs + [weights]
    elif weights.is_file():
        # intra-module mean weights are still reported on relatedness when available
        read_arc_weights(g, weights)
        inputs = inputs + [weights]
    hp = detect_hierarchy(g, dcfg)
    hp.check()
    out_p, out_s = cfg.output("partition.csv"), cfg.output("detect_summary.json")
    write_partition_csv(hp, out_p)
    _write_json({
        "weight_mode": dcfg.weight_mode,
        "levels": hp.depth,
        "modules_per_level": [hp.num_modules(k) for k in range(1, hp.depth + 1)],
        "codelength_bits": hp.codelengths,
        "mean_intra_module_weight": hp.mean_weights,
    }, out_s)
    return inputs, [out_p, out_s], dcfg.seed


def _level_option(cfg, key):
    return cfg.optional_int("evaluate", key)


def stage_evaluate(cfg):
    g, inputs = _graph(cfg)
    part_path = cfg.output("partition.csv")
    pois_path = cfg.input_path("pois", "pois.csv")
    trips_path = cfg.input_path("trips", "trips.csv")
    _require(part_path, pois_path, trips_path)
    hp = read_partition_csv(part_path)
    report = evaluate(
        g, hp, read_pois(pois_path), read_od_trips(trips_path),
        index_level=_level_option(cfg, "index_level"),
        flow_level=_level_option(cfg, "flow_level"),
        cell_m=cfg.getfloat("evaluate", "cell_m"),
        top_k=cfg.getint("evaluate", "top_k"),
        min_region_pois=cfg.getint("evaluate", "min_region_pois"),
        per_region_paf=cfg.get("evaluate", "paf_mode") == "per_region",
    )
    out_r, out_f = cfg.output("report.json"), cfg.output("flow_matrix.csv")
    report.write_json(out_r)
    import numpy as np
    write_flow_matrix(np.array(report.flow_matrix), out_f)
    return inputs + [part_path, pois_path, trips_path], [out_r, out_f], None


def stage_profile(cfg):
    g, inputs = _graph(cfg)
    emb = cfg.output("embeddings.txt")
    _require(emb)
    seed = derive_seed(cfg.seed, "profile")
    bins, unreachable = similarity_distance_profile(
        g, load_embeddings(emb), cfg.getfloat("profile", "sample_fraction"),
        cfg.getfloat("profile", "bin_width_m"), seed)
    out = cfg.output("profile.csv")
    write_profile(bins, out)
    if unreachable:
        log.info("profile: %d sampled pairs unreachable", unreachable)
    return inputs + [emb], [out], seed


RUNNERS = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "train": stage_train,
    "weigh": stage_weigh,
    "detect": stage_detect,
    "evaluate": stage_evaluate,
    "profile": stage_profile,
}


def run_stage(cfg: PipelineConfig, stage: str):
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    stale = stale_inputs(cfg, stage)
    if stale:
        log.info("%s: inputs changed since last run: %s", stage, ", ".join(stale))
    started = time.perf_counter()
    inputs, outputs, seed = RUNNERS[stage](cfg)
    manifest = _write_manifest(cfg, stage, inputs, outputs, seed, started)
    log.info("%s done in %.2fs", stage, manifest["seconds"])
    return manifest


def run_subcommand(name: str, cfg: PipelineConfig) -> int:
    """Run one stage (or the whole pipeline); return the process exit status."""
    stages = PIPELINE if name == "pipeline" else (name,)
    for stage in stages:
        try:
            run_stage(cfg, stage)
        except Exception as exc:  # noqa: BLE001 - every failure becomes an error report
            report = {"stage": stage, "error": type(exc).__name__, "message": str(exc)}
            cfg.out_dir.mkdir(parents=True, exist_ok=True)
            _write_json(report, cfg.output("error.json"))
            print(json.dumps(report), file=sys.stderr)
            if not isinstance(exc, (UrbanflowError, OSError, ValueError, KeyError)):
                log.exception("unexpected failure in %s", stage)
            return 2 if isinstance(exc, MissingInput) else 1
    return 0


def _common_options(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies must not reset values given before the subcommand
    d = (lambda value: argparse.SUPPRESS) if suppress else (lambda value: value)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", default=d(None), help="INI configuration file")
    common.add_argument("--set", dest="sub_overrides" if suppress else "overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")
    common.add_argument("--threads", type=int, default=d(None), help="worker threads for training (1 = reproducible)")
    common.add_argument("--seed", type=int, default=d(None), help="root seed for every stage")
    common.add_argument("--data-dir", default=d(None), help="directory holding input CSVs")
    common.add_argument("--out-dir", default=d(None), help="directory for stage outputs")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="urbanflow", description=__doc__.splitlines()[0],
                                     parents=[_common_options(False)])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sub.add_parser(name, parents=[_common_options(True)], help=f"run the {name} stage" if name != "pipeline"
                       else "run ingest, train, weigh, detect and evaluate in order")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides) + list(getattr(args, "sub_overrides", []))
    for flag, key in ((args.threads, "run.threads"), (args.seed, "run.seed"),
                      (args.data_dir, "run.data_dir"), (args.out_dir, "run.out_dir")):
        if flag is not None:
            overrides.append(f"{key}={flag}")
    try:
        cfg = PipelineConfig.load(args.config, overrides)
    except (MissingInput, ValueError, configparser.Error) as exc:
        report = {"stage": "config", "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(report), file=sys.stderr)
        return 2
    return run_subcommand(args.command, cfg)


if __name__ == "__main__":
    sys.exit(main())
