"""Evolutionary architecture search with hardware-aware fitness.

Each generation trains every new candidate under the selected branch (ptq:
FP32 training only; aligned: FP32 training followed by FP16-aware
fine-tuning), measures it on the simulated device, ranks by
alpha * fps + beta * m * exp(gamma * m), and evolves the population through
elitism, diversity injection and crossover+mutation over the top-half mating
pool. Elites keep their weights and measurements, which makes the best
fitness non-decreasing; every stochastic choice is derived statelessly from
(run seed, generation, slot), so runs are reproducible and resumable at
generation granularity.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import binomtest

from . import device as devmod
from . import genotype as gt
from . import precision as prec
from . import trainer
from .blocks import build_network, mac_count, param_count

__all__ = [
    "GaConfig",
    "FitnessConfig",
    "Candidate",
    "Row",
    "GenerationLog",
    "RunHistory",
    "GapReport",
    "fitness",
    "rank",
    "evolve_generation",
    "run_search",
    "paired_gap_report",
    "gap_statistics",
    "CSV_COLUMNS",
]

_TAG_EVOLVE = 101
_TAG_CANDIDATE = 202

CSV_COLUMNS = ["gen", "slot", "branch", "genotype", "params", "macs", "fps", "latency_ms",
               "gpu_miou", "device_miou", "fitness", "parent_a", "parent_b", "operator", "seed"]


@dataclass(frozen=True)
class GaConfig:
    population_size: int = 16
    generations: int = 10
    k_best: int = 1
    n_random: int = 6
    p_mut: float = 0.15
    mating_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.population_size < 2 or self.generations < 1:
            raise ValueError("population_size >= 2 and generations >= 1 required")
        if self.k_best < 0 or self.n_random < 0:
            raise ValueError("k_best and n_random must be >= 0")
        if self.k_best + self.n_random > self.population_size:
            raise ValueError("k_best + n_random must not exceed population_size")
        if not 0.0 <= self.p_mut <= 1.0:
            raise ValueError("p_mut must be in [0, 1]")
        if self.mating_pool_size < 2:
            raise ValueError("mating pool must hold at least 2 candidates")

    @property
    def mating_pool_size(self) -> int:
        return int(self.population_size * self.mating_fraction)


@dataclass(frozen=True)
class FitnessConfig:
    alpha: float = 0.01
    beta: float = 1.0
    gamma: float = 2.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ValueError("fitness coefficients must be >= 0")
        if self.alpha == 0 and self.beta == 0 and self.gamma == 0:
            raise ValueError("fitness coefficients must not all be zero")


def fitness(fps: float, metric: float, cfg: FitnessConfig) -> float:
    """alpha * fps + beta * metric * exp(gamma * metric)."""
    if fps < 0:
        raise ValueError(f"fps must be >= 0, got {fps}")
    if not 0.0 <= metric <= 1.0:
        raise ValueError(f"metric must be in [0, 1], got {metric}")
    return cfg.alpha * fps + cfg.beta * metric * math.exp(cfg.gamma * metric)


@dataclass
class Candidate:
    genotype: gt.Genotype
    cand_id: str
    operator: str              # init | elite | random | xover
    parent_a: str = ""
    parent_b: str = ""
    network: object = None
    measurement: Optional[devmod.Measurement] = None
    gpu_miou: float = math.nan
    fitness: float = math.nan
    params: int = 0
    macs: int = 0
    diverged: bool = False

    @property
    def code(self) -> str:
        return gt.serialize(self.genotype)

    @property
    def trained(self) -> bool:
        return self.measurement is not None or self.diverged


@dataclass(frozen=True)
class Row:
    gen: int
    slot: int
    branch: str
    genotype: str
    params: int
    macs: int
    fps: float
    latency_ms: float
    gpu_miou: float
    device_miou: float
    fitness: float
    parent_a: str
    parent_b: str
    operator: str
    seed: int


@dataclass
class GenerationLog:
    gen: int
    rows: list
    max_fitness: float
    median_fitness: float
    max_iou: float
    max_fps: float


@dataclass
class RunHistory:
    branch: str
    seed: int
    generations: list = field(default_factory=list)
    best_code: str = ""
    best_row: Optional[Row] = None

    @property
    def rows(self) -> list:
        return [r for log in self.generations for r in log.rows]


@dataclass(frozen=True)
class GapReport:
    mean_gap_ptq: float
    median_gap_ptq: float
    mean_gap_aligned: float
    median_gap_aligned: float
    recovered_fraction: float
    n_ptq: int
    n_aligned: int


# ---------------------------------------------------------------------------
# selection and evolution


def rank(population: list) -> list:
    """Descending fitness; ties broken by lower param count, then genotype."""
    return sorted(population, key=lambda c: (-c.fitness, c.params, c.code))


def _admit(genotype: gt.Genotype, space: gt.SearchSpaceConfig, rng: np.random.Generator) -> gt.Genotype:
    """Enforce the optional hard parameter cap by resampling."""
    if space.c_max is None:
        return genotype
    for _ in range(200):
        if param_count(build_network(genotype)) <= space.c_max:
            return genotype
        genotype = gt.sample_random(space, rng)
    raise gt.GenotypeError(f"could not sample a genotype under C_max={space.c_max}")


def evolve_generation(ranked: list, ga_cfg: GaConfig, space: gt.SearchSpaceConfig,
                      rng: np.random.Generator, next_gen: int) -> list:
    """Next population: elites (weights retained), fresh randoms, offspring."""
    if len(ranked) != ga_cfg.population_size:
        raise ValueError(f"expected ranked population of {ga_cfg.population_size}, got {len(ranked)}")
    out: list[Candidate] = []
    for slot, elite in enumerate(ranked[: ga_cfg.k_best]):
        keep = replace_candidate_identity(elite, f"g{next_gen}s{slot}", "elite", parent_a=elite.cand_id)
        out.append(keep)
    for i in range(ga_cfg.n_random):
        g = _admit(gt.sample_random(space, rng), space, rng)
        out.append(Candidate(g, cand_id=f"g{next_gen}s{len(out)}", operator="random"))
    pool = ranked[: ga_cfg.mating_pool_size]
    n_offspring = ga_cfg.population_size - len(out)
    children: list[tuple[gt.Genotype, str, str]] = []
    while len(children) < n_offspring:
        ia = int(rng.integers(0, len(pool)))
        ib = int(rng.integers(0, len(pool)))
        while ib == ia:  # no immediate repetition within a pair
            ib = int(rng.integers(0, len(pool)))
        pa, pb = pool[ia], pool[ib]
        c1, c2 = gt.crossover(pa.genotype, pb.genotype, rng, space)
        children.append((gt.mutate(c1, ga_cfg.p_mut, rng, space), pa.cand_id, pb.cand_id))
        if len(children) < n_offspring:
            children.append((gt.mutate(c2, ga_cfg.p_mut, rng, space), pa.cand_id, pb.cand_id))
    for g, pa_id, pb_id in children:
        g = _admit(g, space, rng)
        out.append(Candidate(g, cand_id=f"g{next_gen}s{len(out)}", operator="xover",
                             parent_a=pa_id, parent_b=pb_id))
    assert len(out) == ga_cfg.population_size
    return out


def replace_candidate_identity(cand: Candidate, cand_id: str, operator: str,
                               parent_a: str = "", parent_b: str = "") -> Candidate:
    """Clone a candidate into a new generation slot, keeping its evaluation."""
    return Candidate(
        genotype=cand.genotype, cand_id=cand_id, operator=operator,
        parent_a=parent_a, parent_b=parent_b, network=cand.network,
        measurement=cand.measurement, gpu_miou=cand.gpu_miou, fitness=cand.fitness,
        params=cand.params, macs=cand.macs, diverged=cand.diverged,
    )


# ---------------------------------------------------------------------------
# candidate evaluation


def _candidate_seeds(run_seed: int, gen: int, slot: int) -> tuple[int, int]:
    state = np.random.SeedSequence([run_seed, _TAG_CANDIDATE, gen, slot]).generate_state(2)
    return int(state[0]), int(state[1])


def _evaluate_candidate(cand: Candidate, gen: int, slot: int, branch: str, run_seed: int,
                        train_cfg: trainer.TrainConfig, precision_cfg: prec.PrecisionConfig,
                        fit_cfg: FitnessConfig, train_data, eval_data,
                        profile: devmod.DeviceProfile) -> None:
    init_seed, train_seed = _candidate_seeds(run_seed, gen, slot)
    net = build_network(cand.genotype, in_channels=train_data.images.shape[1], seed=init_seed)
    cand.params = param_count(net)
    cand.macs = mac_count(net, (1,) + tuple(train_data.images.shape[1:]))
    cfg = replace(train_cfg, seed=train_seed)
    try:
        trainer.train_fp32(net, train_data, cfg)
        if branch == "aligned":
            trainer.finetune_fp16_aware(net, train_data, cfg, precision_cfg)
        cand.gpu_miou = trainer.evaluate(net, eval_data, mode="fp32", batch_size=cfg.batch_size)
        cand.measurement = devmod.measure(net, eval_data, profile, batch_size=cfg.batch_size)
        cand.fitness = fitness(cand.measurement.fps, cand.measurement.miou_device, fit_cfg)
        cand.network = net
    except trainer.TrainingDiverged:
        cand.diverged = True
        cand.fitness = -math.inf
        cand.gpu_miou = math.nan
        cand.measurement = None
        cand.network = None


def _row_for(cand: Candidate, gen: int, slot: int, branch: str, seed: int) -> Row:
    m = cand.measurement
    return Row(
        gen=gen, slot=slot, branch=branch, genotype=cand.code,
        params=cand.params, macs=cand.macs,
        fps=m.fps if m else math.nan,
        latency_ms=m.latency_ms if m else math.nan,
        gpu_miou=cand.gpu_miou,
        device_miou=m.miou_device if m else math.nan,
        fitness=cand.fitness,
        parent_a=cand.parent_a, parent_b=cand.parent_b,
        operator=cand.operator, seed=seed,
    )


# ---------------------------------------------------------------------------
# run loop with per-generation serialization


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_history_csv(path, rows: list) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(getattr(r, col)) for col in CSV_COLUMNS])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_history_csv(path) -> list:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.append(Row(
                gen=int(rec["gen"]), slot=int(rec["slot"]), branch=rec["branch"],
                genotype=rec["genotype"], params=int(rec["params"]), macs=int(rec["macs"]),
                fps=float(rec["fps"]), latency_ms=float(rec["latency_ms"]),
                gpu_miou=float(rec["gpu_miou"]), device_miou=float(rec["device_miou"]),
                fitness=float(rec["fitness"]), parent_a=rec["parent_a"], parent_b=rec["parent_b"],
                operator=rec["operator"], seed=int(rec["seed"]),
            ))
    return rows


def _log_for(gen: int, rows: list) -> GenerationLog:
    fits = [r.fitness for r in rows]
    ordered = sorted(fits)
    n = len(ordered)
    median = ordered[n // 2] if n % 2 else 0.5 * (ordered[n // 2 - 1] + ordered[n // 2])
    ious = [r.device_miou for r in rows if not math.isnan(r.device_miou)]
    fpss = [r.fps for r in rows if not math.isnan(r.fps)]
    return GenerationLog(
        gen=gen, rows=rows,
        max_fitness=max(fits), median_fitness=median,
        max_iou=max(ious) if ious else math.nan,
        max_fps=max(fpss) if fpss else math.nan,
    )


def _save_state(run_dir: Path, next_gen: int, population: list, history: RunHistory,
                save_weights: bool = True) -> None:
    for old in run_dir.glob("state_*.ckpt"):
        old.unlink()
    entries = []
    for slot, cand in enumerate(population):
        entry = {
            "code": cand.code, "cand_id": cand.cand_id, "operator": cand.operator,
            "parent_a": cand.parent_a, "parent_b": cand.parent_b, "trained": cand.trained,
            "diverged": cand.diverged, "fitness": cand.fitness, "gpu_miou": cand.gpu_miou,
            "params": cand.params, "macs": cand.macs, "checkpoint": None, "measurement": None,
        }
        if cand.measurement is not None:
            entry["measurement"] = {
                "fps": cand.measurement.fps, "latency_ms": cand.measurement.latency_ms,
                "miou_device": cand.measurement.miou_device,
                "param_count": cand.measurement.param_count,
            }
        if cand.network is not None and save_weights:
            name = f"state_{cand.cand_id}.ckpt"
            trainer.save_checkpoint(run_dir / name, cand.network)
            entry["checkpoint"] = name
        entries.append(entry)
    state = {"next_gen": next_gen, "branch": history.branch, "seed": history.seed,
             "population": entries}
    (run_dir / "state.json").write_text(json.dumps(state, sort_keys=True) + "\n",
                                        encoding="utf-8")


def _load_state(run_dir: Path, in_channels: int) -> tuple[int, list]:
    state = json.loads((run_dir / "state.json").read_text(encoding="utf-8"))
    population = []
    for entry in state["population"]:
        cand = Candidate(
            genotype=gt.parse(entry["code"]), cand_id=entry["cand_id"],
            operator=entry["operator"], parent_a=entry["parent_a"], parent_b=entry["parent_b"],
            gpu_miou=float(entry["gpu_miou"]), fitness=float(entry["fitness"]),
            params=entry["params"], macs=entry["macs"], diverged=entry["diverged"],
        )
        if entry["measurement"] is not None:
            m = entry["measurement"]
            cand.measurement = devmod.Measurement(
                fps=float(m["fps"]), latency_ms=float(m["latency_ms"]),
                miou_device=float(m["miou_device"]), param_count=int(m["param_count"]))
        if entry["checkpoint"]:
            cand.network = trainer.restore_network(run_dir / entry["checkpoint"],
                                                   in_channels=in_channels)
        population.append(cand)
    return int(state["next_gen"]), population


def run_search(space: gt.SearchSpaceConfig, ga_cfg: GaConfig, fit_cfg: FitnessConfig,
               train_cfg: trainer.TrainConfig, precision_cfg: prec.PrecisionConfig,
               train_data, eval_data, profile: devmod.DeviceProfile, branch: str,
               run_dir=None, threads: int = 1) -> RunHistory:
    """Run one branch of the search; resumes from run_dir state if present."""
    if branch not in ("ptq", "aligned"):
        raise ValueError(f"branch must be 'ptq' or 'aligned', got {branch!r}")
    run_seed = ga_cfg.seed
    history = RunHistory(branch=branch, seed=run_seed)
    run_path = Path(run_dir) if run_dir is not None else None
    in_channels = train_data.images.shape[1]

    start_gen = 0
    population: list[Candidate] = []
    if run_path is not None and (run_path / "state.json").is_file():
        start_gen, population = _load_state(run_path, in_channels)
        for row in read_history_csv(run_path / "history.csv"):
            if not history.generations or history.generations[-1].gen != row.gen:
                history.generations.append(_log_for(row.gen, []))
            history.generations[-1].rows.append(row)
        history.generations = [_log_for(log.gen, log.rows) for log in history.generations]
    else:
        init_rng = np.random.default_rng(np.random.SeedSequence([run_seed, _TAG_EVOLVE, 0]))
        for slot in range(ga_cfg.population_size):
            g = _admit(gt.sample_random(space, init_rng), space, init_rng)
            population.append(Candidate(g, cand_id=f"g0s{slot}", operator="init"))

    ranked = rank(population) if population and all(c.trained for c in population) else population
    prev_max = max((log.max_fitness for log in history.generations), default=-math.inf)

    for gen in range(start_gen, ga_cfg.generations):
        todo = [(slot, cand) for slot, cand in enumerate(population) if not cand.trained]

        def work(item):
            slot, cand = item
            _evaluate_candidate(cand, gen, slot, branch, run_seed, train_cfg, precision_cfg,
                                fit_cfg, train_data, eval_data, profile)

        if threads > 1 and len(todo) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(work, todo))
        else:
            for item in todo:
                work(item)

        rows = [_row_for(c, gen, slot, branch, run_seed) for slot, c in enumerate(population)]
        log = _log_for(gen, rows)
        history.generations.append(log)
        if log.max_fitness < prev_max:
            raise AssertionError(
                f"max fitness decreased: {prev_max} -> {log.max_fitness} at generation {gen}")
        prev_max = log.max_fitness

        ranked = rank(population)
        if gen + 1 < ga_cfg.generations:
            evolve_rng = np.random.default_rng(np.random.SeedSequence([run_seed, _TAG_EVOLVE, gen + 1]))
            population = evolve_generation(ranked, ga_cfg, space, evolve_rng, gen + 1)
        if run_path is not None:
            write_history_csv(run_path / "history.csv", history.rows)
            more = gen + 1 < ga_cfg.generations
            _save_state(run_path, gen + 1, population if more else ranked, history,
                        save_weights=more)
            best = ranked[0]
            if best.network is not None:
                trainer.save_checkpoint(run_path / "best.ckpt", best.network)
                (run_path / "best_genotype.txt").write_text(best.code + "\n", encoding="utf-8")

    best = ranked[0]
    history.best_code = best.code
    best_rows = [r for r in history.generations[-1].rows if r.genotype == best.code]
    history.best_row = best_rows[0] if best_rows else None
    return history


# ---------------------------------------------------------------------------
# paired-branch reporting


def _branch_gaps(history: RunHistory) -> list:
    """One gap per trained candidate (elite duplicates excluded)."""
    gaps = []
    for row in history.rows:
        if row.operator == "elite":
            continue
        if math.isnan(row.gpu_miou) or math.isnan(row.device_miou):
            continue
        gaps.append(row.gpu_miou - row.device_miou)
    return gaps


def paired_gap_report(history_ptq: RunHistory, history_aligned: RunHistory) -> GapReport:
    """Gap statistics across branches run on the same data with shared seeds."""
    if history_ptq.seed != history_aligned.seed:
        raise ValueError(
            f"mismatched seeds: ptq={history_ptq.seed}, aligned={history_aligned.seed}")
    gaps_p = _branch_gaps(history_ptq)
    gaps_a = _branch_gaps(history_aligned)
    if not gaps_p or not gaps_a:
        raise ValueError("both branches need at least one evaluated candidate")
    return GapReport(
        mean_gap_ptq=float(np.mean(gaps_p)),
        median_gap_ptq=float(np.median(gaps_p)),
        mean_gap_aligned=float(np.mean(gaps_a)),
        median_gap_aligned=float(np.median(gaps_a)),
        recovered_fraction=recovered_fraction(float(np.mean(gaps_p)), float(np.mean(gaps_a))),
        n_ptq=len(gaps_p),
        n_aligned=len(gaps_a),
    )


def recovered_fraction(gap_ptq: float, gap_aligned: float) -> float:
    """1 - gap_aligned / gap_ptq; 0 when both branches match exactly."""
    if gap_ptq == 0.0:
        return 0.0 if gap_aligned == 0.0 else -math.inf
    return 1.0 - gap_aligned / gap_ptq


@dataclass(frozen=True)
class GapStatistics:
    mean_gap_ptq: float
    mean_gap_aligned: float
    median_gap_ptq: float
    median_gap_aligned: float
    recovered_fraction: float
    wins: int
    n_pairs: int
    sign_test_p: float


def gap_statistics(gaps_ptq, gaps_aligned) -> GapStatistics:
    """Paired per-seed statistics with a one-sided binomial sign test of
    aligned gap < ptq gap (ties dropped)."""
    gp = np.asarray(gaps_ptq, dtype=float)
    ga = np.asarray(gaps_aligned, dtype=float)
    if gp.shape != ga.shape or gp.ndim != 1 or gp.size == 0:
        raise ValueError("gap lists must be equal-length non-empty 1-d sequences")
    wins = int(np.sum(ga < gp))
    ties = int(np.sum(ga == gp))
    n_eff = gp.size - ties
    pvalue = binomtest(wins, n_eff, 0.5, alternative="greater").pvalue if n_eff else 1.0
    return GapStatistics(
        mean_gap_ptq=float(gp.mean()),
        mean_gap_aligned=float(ga.mean()),
        median_gap_ptq=float(np.median(gp)),
        median_gap_aligned=float(np.median(ga)),
        recovered_fraction=recovered_fraction(float(gp.mean()), float(ga.mean())),
        wins=wins,
        n_pairs=int(gp.size),
        sign_test_p=float(pvalue),
    )
