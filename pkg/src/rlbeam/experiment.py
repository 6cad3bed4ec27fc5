"""Experiment runner: builds the array and users from a config, runs a task and
writes its artifacts."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from . import __version__
from .agent import AgentConfig, train_beam_pattern
from .array import ArrayGeometry, ImpairmentSpec, sample_impaired_geometry
from .beams import (
    Codebook,
    PhaseSet,
    beamsteering_codebook,
    codebook_objective,
    egc_beam,
    egc_codebook,
    egc_upper_bound,
    export_patterns,
)
from .channel import ChannelSet, ScenarioParams, generate_scenario, load_channels, normalize, save_channels
from .codebook import CodebookConfig, learn_codebook
from .config import ExperimentConfig

log = logging.getLogger(__name__)

AGENT_KEYS = tuple(f for f in AgentConfig.__dataclass_fields__ if f not in ("M", "r"))
CODEBOOK_KEYS = tuple(f for f in CodebookConfig.__dataclass_fields__ if f != "N")


def build_geometry(cfg: ExperimentConfig) -> ArrayGeometry:
    if cfg["array.file"]:
        geo = ArrayGeometry.load(cfg["array.file"])
        if geo.M != cfg["array.M"]:
            raise ValueError(f"geometry file has M={geo.M}, config says {cfg['array.M']}")
        return geo
    spec = ImpairmentSpec(
        cfg["array.M"], cfg["array.spacing"], cfg["array.sigma_d"], cfg["array.sigma_p"],
        cfg.seed_for("geometry"),
    )
    return sample_impaired_geometry(spec)


def build_channels(cfg: ExperimentConfig, geometry: ArrayGeometry) -> tuple[ChannelSet, float]:
    if cfg["scenario.file"]:
        cs = load_channels(cfg["scenario.file"])
        if cs.M != cfg["array.M"]:
            raise ValueError(f"channel file has M={cs.M}, config says {cfg['array.M']}")
    else:
        sc = cfg.section("scenario")
        params = ScenarioParams(
            spans=sc["spans"], n_paths=sc["n_paths"], weak_power_db=tuple(sc["weak_power_db"]),
            gain_db=tuple(sc["gain_db"]), reflectors=sc["reflectors"],
            reflector_spread=sc["reflector_spread"], nlos_power_db=tuple(sc["nlos_power_db"]),
        )
        cs = generate_scenario(sc["kind"], geometry, sc["K"], cfg.seed_for("scenario"), params)
    if cfg["scenario.normalize"]:
        return normalize(cs)
    return cs, 1.0


def agent_config(cfg: ExperimentConfig) -> AgentConfig:
    a = cfg.section("agent")
    return AgentConfig(cfg["array.M"], cfg["array.r"], **{k: a[k] for k in AGENT_KEYS})


def codebook_config(cfg: ExperimentConfig) -> CodebookConfig:
    c = cfg.section("codebook")
    return CodebookConfig(c["N"], **{k: c[k] for k in CODEBOOK_KEYS})


def baseline_sizes(N: int, cap: int = 32) -> list[int]:
    sizes = [N]
    while sizes[-1] * 2 <= cap:
        sizes.append(sizes[-1] * 2)
    return sizes


def compare_baselines(codebook: Codebook, cs: ChannelSet, r=None, sizes=None) -> list[dict]:
    """Learned codebook vs beamsteering codebooks vs the mean EGC bound.

    Beamsteering beams are designed for the ideal half-wavelength array; when
    ``r`` is given, phase-quantized versions are listed too.
    """
    if codebook.M != cs.M:
        raise ValueError(f"dimension mismatch: codebook M={codebook.M}, channels M={cs.M}")
    egc = float(np.mean([egc_upper_bound(h) for h in cs.channels]))
    rows = []

    def add(name, n, cb):
        obj = codebook_objective(cb, cs)
        rows.append({"name": name, "beams": n, "objective": obj, "egc_ratio": obj / egc})

    add("learned", codebook.N, codebook)
    for n in sizes or baseline_sizes(codebook.N):
        add("beamsteering", n, beamsteering_codebook(cs.M, n))
        if r is not None:
            add("beamsteering_quantized", n, beamsteering_codebook(cs.M, n, PhaseSet(r)))
    add("egc", cs.K, egc_codebook(cs))
    rows.append({"name": "egc_bound_mean", "beams": 0, "objective": egc, "egc_ratio": 1.0})
    return rows


def write_rows(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(list(rows[0]))
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row.values()])


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _patterns(out: Path, weights, geometry: ArrayGeometry, points: int) -> None:
    grid = np.linspace(0.0, 180.0, points)
    export_patterns(out / "patterns_clean.csv", weights, ArrayGeometry.ideal(geometry.M), grid)
    export_patterns(out / "patterns_corrupted.csv", weights, geometry, grid)


def run(cfg: ExperimentConfig, out=None) -> dict:
    """Execute ``cfg['task']`` and write artifacts into ``out``; returns the metadata."""
    out = Path(out or cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    task = cfg["task"]
    geometry = build_geometry(cfg)
    meta = {
        "library_version": __version__,
        "task": task,
        # the output location is not part of what was computed
        "config": {k: v for k, v in cfg.resolved().items() if k != "out"},
        "geometry_id": geometry.fingerprint(),
    }
    r = cfg["array.r"]
    points = cfg["patterns.points"]

    if task == "export-patterns":
        cb = Codebook.load(cfg["evaluate.codebook"])
        _patterns(out, cb.weights(), geometry, points)
        _write_json(out / "metadata.json", meta)
        return meta

    cs, delta = build_channels(cfg, geometry)
    meta["normalization"] = delta
    meta["users"] = cs.K

    if task == "generate-scenario":
        geometry.save(out / "geometry.json")
        save_channels(cs, out / "channels.bfch")
    elif task == "learn-beam":
        res = train_beam_pattern(agent_config(cfg), cs, cfg["agent.T"], cfg.seed_for("agent"))
        cb = Codebook([res.best_beam], PhaseSet(r))
        cb.save(out / "codebook.json")
        res.curve.write_csv(out / "curve.csv")
        weights = cb.weights()
        if cs.K == 1:
            weights = np.vstack([weights, egc_beam(cs.channels[0])])
        _patterns(out, weights, geometry, points)
        rows = compare_baselines(cb, cs, r)
        write_rows(out / "baselines.csv", rows)
        meta["best_gain"] = res.best_gain
        meta["best_gain_denormalized"] = res.best_gain * delta**2
        meta["egc_ratio"] = rows[0]["egc_ratio"]
    elif task == "learn-codebook":
        res = learn_codebook(
            codebook_config(cfg), agent_config(cfg), cs, cfg.seed_for("agent"),
            sensing_seed=cfg.seed_for("sensing"), kmeans_seed=cfg.seed_for("kmeans"),
        )
        res.codebook.save(out / "codebook.json")
        res.write_assignments(out / "assignments.csv")
        res.cluster_model.save(out / "cluster_model.json")
        write_rows(
            out / "objectives.csv",
            [{"round": i + 1, "objective": o} for i, o in enumerate(res.objectives)],
        )
        _patterns(out, res.codebook.weights(), geometry, points)
        rows = compare_baselines(res.codebook, cs, r)
        write_rows(out / "baselines.csv", rows)
        meta["objective"] = res.objectives[-1]
        meta["egc_ratio"] = rows[0]["egc_ratio"]
    elif task == "evaluate":
        cb = Codebook.load(cfg["evaluate.codebook"])
        rows = compare_baselines(cb, cs, r)
        write_rows(out / "baselines.csv", rows)
        meta["objective"] = rows[0]["objective"]
        meta["egc_ratio"] = rows[0]["egc_ratio"]
    _write_json(out / "metadata.json", meta)
    return meta
