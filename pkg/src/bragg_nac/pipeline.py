"""Run-directory orchestration: one function per pipeline stage.

Every stage reads the persisted run configuration, checks its prerequisites,
hashes its inputs (configuration section, seed and upstream artifacts) and
either skips as up to date or runs and records itself in ``manifest.json``.

Run directory layout::

    config.json   manifest.json
    data/dataset.nacd
    search/trials.jsonl  search/pareto.csv  search/timings.jsonl  search/selected.json
    hpo/{nac,braggnn}_trials.csv  hpo/{nac,braggnn}_best.json
    models/{nac_base,braggnn,nac_compressed_b<bits>}.nacf
    compress/trajectory_b<bits>.csv
    eval/metrics.json  eval/distances.csv
    report/{pareto,trajectory,distances,summary}.csv
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import archspace, compress, evolution, tpe
from .costmodel import QuantSparsityConfig, cost, network_sparsity, param_count
from .data import DataConfig, PeakDataset, center_of_mass_batch, generate_dataset, normalize
from .engine import checkpoint
from .engine.training import TrainConfig, evaluate, train

logger = logging.getLogger(__name__)

STAGES = ("gen-data", "global-search", "local-hpo", "train", "compress", "evaluate", "report")
SUMMARY_COLUMNS = ("model", "mean_distance_px", "mbops", "params")
MODEL_ROWS = (("BraggNN", "braggnn"), ("NAC base", "nac_base"), ("NAC compressed", "nac_compressed"))

DESK_CONFIG = {
    "seed": 0,
    "workers": 1,
    "data": {"n_samples": 5000, "noise_level": 0.5},
    "global_search": {"population": 8, "budget": 40, "epochs": 10, "lr": 1e-3,
                      "batch_size": 128, "crossover_prob": 0.9, "mutation_rate": 0.1,
                      "selection": "knee"},
    "local_hpo": {"n_trials": 30, "epochs": 5, "baseline": True},
    "train": {"epochs": 100},
    "compress": {"bits": [7], "n_iterations": 8, "epochs": 30, "lr_factor": 0.1,
                 "scope": "layer", "min_layer_size": 64, "report_bits": 7},
    "evaluate": {},
}

# budgets of the full protocol: 200 global trials at 50 epochs, 100 HPO trials
PAPER_OVERRIDES = {
    "data": {"n_samples": 70000},
    "global_search": {"population": 20, "budget": 200, "epochs": 50},
    "local_hpo": {"n_trials": 100, "epochs": 50},
    "train": {"epochs": 300},
    "compress": {"bits": [4, 5, 6, 7, 8]},
}


# which stage writes each artifact directory (for "run X first" hints)
PRODUCERS = {"data": "gen-data", "search": "global-search", "hpo": "local-hpo",
             "compress": "compress", "eval": "evaluate", "report": "report"}


def producer(rel):
    head = rel.split("/", 1)[0]
    if head == "models":
        return "compress" if "compressed" in rel else "train"
    return PRODUCERS.get(head, "run-all")


class ConfigError(ValueError):
    """Bad or inconsistent configuration (CLI exit code 1)."""


class StageError(RuntimeError):
    """A stage could not run or failed (CLI exit code 2)."""


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def make_config(user=None, paper_scale=False, seed=None, workers=None):
    """Defaults, then paper-scale budgets, then the user's file, then CLI flags."""
    config = _merge(DESK_CONFIG, PAPER_OVERRIDES) if paper_scale else copy.deepcopy(DESK_CONFIG)
    if user:
        unknown = set(user) - set(DESK_CONFIG)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        config = _merge(config, user)
    if seed is not None:
        config["seed"] = int(seed)
    if workers is not None:
        config["workers"] = int(workers)
    config["paper_scale"] = bool(paper_scale)
    validate_config(config)
    return config


def validate_config(config):
    try:
        if config["workers"] < 1:
            raise ConfigError("workers must be >= 1")
        if config["data"]["n_samples"] < 10:
            raise ConfigError("data.n_samples must be >= 10")
        gs = config["global_search"]
        evolution.SearchConfig(population=gs["population"], budget=gs["budget"])
        if gs["selection"] not in ("knee", "min_distance", "nac_base"):
            raise ConfigError("global_search.selection must be knee, min_distance or nac_base")
        if config["local_hpo"]["n_trials"] < 1:
            raise ConfigError("local_hpo.n_trials must be >= 1")
        for b in config["compress"]["bits"]:
            if b not in compress.ALLOWED_BITS:
                raise ConfigError(f"compress.bits entries must be in {compress.ALLOWED_BITS}")
        if config["compress"]["scope"] not in ("global", "layer"):
            raise ConfigError("compress.scope must be global or layer")
        if config["compress"]["report_bits"] not in config["compress"]["bits"]:
            raise ConfigError("compress.report_bits must be one of compress.bits")
        DataConfig(**{k: v for k, v in config["data"].items() if k != "n_samples"})
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_config_file(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_json(path, payload):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


@dataclass
class StageOutcome:
    stage: str
    skipped: bool
    outputs: list


class Run:
    """A run directory plus its configuration and manifest."""

    def __init__(self, run_dir, config):
        self.dir = os.path.abspath(run_dir)
        self.config = config
        os.makedirs(self.dir, exist_ok=True)
        write_json(self.path("config.json"), config)
        self.manifest_path = self.path("manifest.json")
        if os.path.exists(self.manifest_path):
            with open(self.manifest_path) as fh:
                self.manifest = json.load(fh)
        else:
            self.manifest = {"stages": {}}

    @classmethod
    def open(cls, run_dir, config_path=None, paper_scale=False, seed=None, workers=None):
        """Build the effective config; an existing run's config is the fallback base."""
        user = None
        if config_path:
            user = load_config_file(config_path)
        else:
            existing = os.path.join(run_dir, "config.json")
            if os.path.exists(existing):
                user = load_config_file(existing)
                paper_scale = paper_scale or user.pop("paper_scale", False)
        user = user or {}
        user.pop("paper_scale", None)
        return cls(run_dir, make_config(user, paper_scale, seed, workers))

    def path(self, *parts):
        return os.path.join(self.dir, *parts)

    @property
    def seed(self):
        return self.config["seed"]

    def require(self, rel):
        full = self.path(rel)
        if not os.path.exists(full):
            raise StageError(f"missing {rel}; run `{producer(rel)}` first")
        return full

    def inputs_hash(self, section, inputs):
        h = hashlib.sha256()
        h.update(json.dumps({"section": section, "seed": self.seed}, sort_keys=True).encode())
        for rel in sorted(inputs):
            h.update(rel.encode())
            h.update(_sha256_file(self.path(rel)).encode())
        return h.hexdigest()

    def up_to_date(self, stage, digest):
        entry = self.manifest["stages"].get(stage)
        if not entry or entry.get("inputs_hash") != digest:
            return False
        return all(os.path.exists(self.path(p)) for p in entry["outputs"])

    def record(self, stage, digest, outputs, wall_time):
        self.manifest["stages"][stage] = {"inputs_hash": digest, "outputs": sorted(outputs),
                                          "wall_time": round(wall_time, 3), "seed": self.seed}
        write_json(self.manifest_path, self.manifest)

    def stage(self, name, section, inputs, body):
        digest = self.inputs_hash(section, inputs)
        if self.up_to_date(name, digest):
            logger.info("%s: up-to-date", name)
            return StageOutcome(name, True, self.manifest["stages"][name]["outputs"])
        start = time.perf_counter()
        outputs = body()
        self.record(name, digest, outputs, time.perf_counter() - start)
        return StageOutcome(name, False, outputs)

    def dataset(self):
        return PeakDataset.load(self.require("data/dataset.nacd"))


# ---------------------------------------------------------------------------
# stages

def cmd_gen_data(run):
    section = run.config["data"]

    def body():
        os.makedirs(run.path("data"), exist_ok=True)
        overrides = {k: v for k, v in section.items() if k != "n_samples"}
        ds = generate_dataset(section["n_samples"], seed=run.seed, **overrides)
        ds.save(run.path("data/dataset.nacd"))
        return ["data/dataset.nacd"]

    return run.stage("gen-data", section, [], body)


def select_genome(archive, rule):
    """Pick the genome handed to local search from the final Pareto archive.

    ``knee`` minimizes the distance to the utopia point after scaling both
    objectives to [0, 1] over the archive; ``min_distance`` takes the most
    accurate member; ``nac_base`` ignores the archive.
    """
    if rule == "nac_base":
        return archspace.nac_base_genome()
    members = sorted(archive, key=lambda m: m.trial_id)
    if not members:
        raise StageError("global search produced no successful candidates")
    objs = np.array([m.objectives for m in members], dtype=float)
    if rule == "min_distance":
        return members[int(np.lexsort((objs[:, 1], objs[:, 0]))[0])].genome
    span = objs.max(axis=0) - objs.min(axis=0)
    span[span == 0] = 1.0
    scaled = (objs - objs.min(axis=0)) / span
    return members[int(np.argmin(np.hypot(scaled[:, 0], scaled[:, 1])))].genome


def cmd_global_search(run):
    section = run.config["global_search"]
    inputs = ["data/dataset.nacd"]
    run.require(inputs[0])

    def body():
        os.makedirs(run.path("search"), exist_ok=True)
        # resume a partial log only if it was produced from the same inputs
        stamp = run.path("search/inputs.sha256")
        digest = run.inputs_hash(section, inputs)
        resume = os.path.exists(stamp) and open(stamp).read().strip() == digest
        with open(stamp, "w") as fh:
            fh.write(digest + "\n")
        ds = run.dataset()
        evaluator = evolution.PartialTrainingEvaluator(
            ds.train, ds.val, epochs=section["epochs"], lr=section["lr"],
            batch_size=section["batch_size"])
        config = evolution.SearchConfig(
            population=section["population"], budget=section["budget"],
            crossover_prob=section["crossover_prob"], mutation_rate=section["mutation_rate"],
            seed=run.seed, workers=run.config["workers"], epochs=section["epochs"])
        result = evolution.run_global_search(
            config, evaluator, log_path=run.path("search/trials.jsonl"),
            pareto_path=run.path("search/pareto.csv"),
            timings_path=run.path("search/timings.jsonl"), resume=resume)
        genome = select_genome(result.archive, section["selection"])
        write_json(run.path("search/selected.json"),
                    {"rule": section["selection"], "genome": genome.to_dict()})
        return ["search/trials.jsonl", "search/pareto.csv", "search/selected.json"]

    return run.stage("global-search", section, inputs, body)


def _selected_spec(run):
    path = run.require("search/selected.json")
    with open(path) as fh:
        genome = archspace.Genome.from_dict(json.load(fh)["genome"])
    return archspace.decode(genome)


def make_scorer(spec, train_data, val_data, epochs):
    """``(params, seed) -> validation mean distance`` for a training-domain point."""

    def score(params, seed):
        net = spec.build(seed=seed)
        cfg = TrainConfig(epochs=epochs, seed=seed, **tpe.resolve_training_params(params))
        result = train(net, *train_data, cfg)
        return math.inf if result.failed else evaluate(net, *val_data).mean_distance

    return score


def _hpo_targets(run):
    targets = [("nac", _selected_spec(run))]
    if run.config["local_hpo"]["baseline"]:
        targets.append(("braggnn", archspace.builtin_braggnn()))
    return targets


def cmd_local_hpo(run):
    section = run.config["local_hpo"]
    inputs = ["data/dataset.nacd", "search/selected.json"]
    run.require(inputs[0])
    run.require(inputs[1])

    def body():
        os.makedirs(run.path("hpo"), exist_ok=True)
        ds = run.dataset()
        domain = tpe.training_domain()
        outputs = []
        for name, spec in _hpo_targets(run):
            score = make_scorer(spec, ds.train, ds.val, section["epochs"])
            result = tpe.run_local_hpo(score, domain, n_trials=section["n_trials"], seed=run.seed)
            tpe.write_table_csv(run.path(f"hpo/{name}_trials.csv"), result, domain)
            tpe.write_best_json(run.path(f"hpo/{name}_best.json"), result,
                                extra={"train": tpe.resolve_training_params(result.best.params)})
            outputs += [f"hpo/{name}_trials.csv", f"hpo/{name}_best.json"]
        return outputs

    return run.stage("local-hpo", section, inputs, body)


def _best_train_params(run, name):
    with open(run.require(f"hpo/{name}_best.json")) as fh:
        return json.load(fh)["train"]


def cmd_train(run):
    section = run.config["train"]
    run.require("data/dataset.nacd")
    targets = _hpo_targets(run)
    inputs = ["data/dataset.nacd", "search/selected.json"]
    inputs += [f"hpo/{name}_best.json" for name, _ in targets]
    for rel in inputs:
        run.require(rel)

    def body():
        os.makedirs(run.path("models"), exist_ok=True)
        ds = run.dataset()
        outputs = []
        for name, spec in targets:
            params = _best_train_params(run, name)
            net = spec.build(seed=run.seed)
            result = train(net, *ds.train, TrainConfig(epochs=section["epochs"], seed=run.seed,
                                                       **params))
            if result.failed:
                raise StageError(f"training {name} diverged; inspect hpo/{name}_best.json")
            model = "nac_base" if name == "nac" else name
            checkpoint.save(run.path(f"models/{model}.nacf"), net, spec.layers,
                            {"model": model, "train": params, "epochs": section["epochs"]})
            outputs.append(f"models/{model}.nacf")
        return outputs

    return run.stage("train", section, inputs, body)


def _load_model(run, rel):
    net, layers, meta = checkpoint.load(run.require(rel))
    return net, archspace.resolve(layers, net.input_shape), meta


def cmd_compress(run):
    section = run.config["compress"]
    inputs = ["data/dataset.nacd", "models/nac_base.nacf", "hpo/nac_best.json"]
    for rel in inputs:
        run.require(rel)

    def body():
        os.makedirs(run.path("compress"), exist_ok=True)
        ds = run.dataset()
        net, spec, _ = _load_model(run, "models/nac_base.nacf")
        params = _best_train_params(run, "nac")
        config = compress.CompressConfig(
            n_iterations=section["n_iterations"], epochs=section["epochs"],
            lr=max(params["lr"] * section["lr_factor"], 1e-5),
            weight_decay=params["weight_decay"], schedule=params["schedule"],
            batch_size=params["batch_size"], seed=run.seed, scope=section["scope"],
            min_layer_size=section["min_layer_size"])
        sweep = compress.bits_sweep(net, spec, ds.train, ds.val, bits=tuple(section["bits"]),
                                    config=config, workers=run.config["workers"])
        outputs = []
        for bits, (cnet, traj) in sweep.items():
            compress.write_trajectory_csv(run.path(f"compress/trajectory_b{bits}.csv"), traj)
            checkpoint.save(run.path(f"models/nac_compressed_b{bits}.nacf"), cnet, spec.layers,
                            {"model": "nac_compressed", "bits": bits, "dense": traj.dense})
            outputs += [f"compress/trajectory_b{bits}.csv", f"models/nac_compressed_b{bits}.nacf"]
        return outputs

    return run.stage("compress", section, inputs, body)


def model_cost(net, spec):
    """(MBOPs, parameter count) of a possibly pruned and quantized network."""
    bits = {l.quant_bits for l in net.weighted_layers().values()} - {None}
    weight_bits = bits.pop() if len(bits) == 1 else 32
    config = QuantSparsityConfig(weight_bits=weight_bits, act_bits=32,
                                 sparsity=network_sparsity(net))
    return cost(spec, config).mbops, param_count(spec).total


def _model_files(run):
    bits = run.config["compress"]["report_bits"]
    files = {"braggnn": "models/braggnn.nacf", "nac_base": "models/nac_base.nacf",
             "nac_compressed": f"models/nac_compressed_b{bits}.nacf"}
    if not run.config["local_hpo"]["baseline"]:
        files.pop("braggnn")
    return files


def cmd_evaluate(run):
    files = _model_files(run)
    inputs = ["data/dataset.nacd", *files.values()]
    run.require(inputs[0])
    for rel in files.values():
        run.require(rel)

    def body():
        os.makedirs(run.path("eval"), exist_ok=True)
        ds = run.dataset()
        X, y = ds.test
        metrics, rows = {}, []
        for model, rel in files.items():
            net, spec, _ = _load_model(run, rel)
            ev = evaluate(net, X, y)
            mbops, params = model_cost(net, spec)
            metrics[model] = {"mean_distance_px": ev.mean_distance, "mbops": mbops,
                              "params": params}
            rows += [(model, i, d) for i, d in enumerate(ev.distances)]
        com = center_of_mass_batch(X[:, 0])
        com_dist = 11.0 * np.linalg.norm(normalize(com) - y, axis=1)
        metrics["center_of_mass"] = {"mean_distance_px": float(com_dist.mean())}
        rows += [("center_of_mass", i, d) for i, d in enumerate(com_dist)]
        write_json(run.path("eval/metrics.json"), metrics)
        with open(run.path("eval/distances.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("model", "sample", "distance_px"))
            writer.writerows((m, i, f"{d:.6f}") for m, i, d in rows)
        return ["eval/metrics.json", "eval/distances.csv"]

    return run.stage("evaluate", run.config["evaluate"], inputs, body)


def budgets(config):
    return {"global_trials": config["global_search"]["budget"],
            "hpo_trials": config["local_hpo"]["n_trials"],
            "partial_epochs": config["global_search"]["epochs"]}


def _report_pareto(run, dest):
    records = evolution.read_trial_log(run.require("search/trials.jsonl"))
    ok = [r for r in records if r["status"] == "ok"]
    objs = [tuple(r["objectives"]) for r in ok]
    front = set(evolution.fast_nondominated_sort(objs)[0]) if objs else set()
    with open(dest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow((*evolution.PARETO_COLUMNS, "on_front"))
        for i, r in enumerate(ok):
            writer.writerow([r["trial_id"], f"{r['objectives'][0]:.6f}",
                             f"{r['objectives'][1]:.6f}", r["generation"],
                             r["info"].get("params", ""), 0.0, 32, int(i in front)])


def cmd_report(run):
    files = _model_files(run)
    bits = run.config["compress"]["bits"]
    inputs = ["search/trials.jsonl", "eval/metrics.json", "eval/distances.csv"]
    inputs += [f"compress/trajectory_b{b}.csv" for b in bits]
    run.require("search/trials.jsonl")
    run.require("eval/metrics.json")
    for b in bits:
        run.require(f"compress/trajectory_b{b}.csv")
    for key, value in budgets(run.config).items():
        print(f"{key}: {value}")

    def body():
        os.makedirs(run.path("report"), exist_ok=True)
        _report_pareto(run, run.path("report/pareto.csv"))
        with open(run.path("report/trajectory.csv"), "w", newline="") as out:
            for j, b in enumerate(bits):
                with open(run.path(f"compress/trajectory_b{b}.csv")) as fh:
                    lines = fh.read().splitlines()
                out.write("\n".join(lines if j == 0 else lines[1:]) + "\n")
        with open(run.path("eval/distances.csv")) as src, \
                open(run.path("report/distances.csv"), "w") as dst:
            dst.write(src.read())
        with open(run.path("eval/metrics.json")) as fh:
            metrics = json.load(fh)
        with open(run.path("report/summary.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(SUMMARY_COLUMNS)
            for label, key in MODEL_ROWS:
                if key in files:
                    m = metrics[key]
                    writer.writerow([label, f"{m['mean_distance_px']:.6f}",
                                     f"{m['mbops']:.6f}", m["params"]])
        write_json(run.path("report/budgets.json"), budgets(run.config))
        return ["report/pareto.csv", "report/trajectory.csv", "report/distances.csv",
                "report/summary.csv", "report/budgets.json"]

    return run.stage("report", {"bits": bits, "rows": sorted(files)}, inputs, body)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "global-search": cmd_global_search,
    "local-hpo": cmd_local_hpo,
    "train": cmd_train,
    "compress": cmd_compress,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def run_all(run):
    return [COMMANDS[name](run) for name in STAGES]
