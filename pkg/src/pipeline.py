"""
Experiment orchestration: data -> nested-CV training -> uncertainty scoring -> evaluation.
"""
import json
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import DOSE_SCALE, NetConfig, RunConfig, config_hash
from .errors import DataError, StageError
from .evaluate import (EvalReport, dvh_impact_table, dvh_metric, run_branch_impact, run_id_analysis,
                       run_ood_analysis, structure_metrics, write_histograms, write_report)
from .logger import setup_logger
from .net import FORWARD_PASSES, Params, load_params, save_params
from .synth import Sample, generate, load_dataset, save_dataset, split_families
from .train import CvPlan, ensemble_seeds, make_cv_plan, train_model
from .uq import (DE, RECON, Inference, dose_error, ensemble_maps, ensemble_mean, mcdo_maps, mcdo_tag,
                 predict_volume, recon_score, score_from_maps)

logger = setup_logger("pipeline")

# where and how wide a run executes; none of these change its results
RUN_LOCATION_FIELDS = {"output_dir", "data_dir", "jobs"}
SCORE_COLUMNS = ["sample_id", "family", "method", "value", "dose_mse", "fold"]
DVH_COLUMNS = ["sample_id", "structure", "metric", "ground_truth", "standard", "recon"]
TIMING_COLUMNS = ["method", "samples", "forward_passes", "seconds", "seconds_per_sample", "relative_to_recon"]


@contextmanager
def stage(name: str):
    logger.info(f"=== Stage '{name}' started ===")
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        logger.error(f"Stage '{name}' failed: {type(e).__name__}: {e}")
        raise StageError(name, e) from e
    logger.info(f"=== Stage '{name}' finished ===")


def _to_csv(frame: pd.DataFrame, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\r\n")


def _write_json(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


@dataclass
class ScoreTable:
    rows: List[Dict] = field(default_factory=list)

    def add(self, sample: Sample, method: str, value: float, dose_mse: Optional[float], fold: Optional[int]):
        self.rows.append({
            "sample_id": sample.id, "family": sample.family, "method": method,
            "value": float(value), "dose_mse": dose_mse, "fold": fold,
        })

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=SCORE_COLUMNS)


class ExperimentRunner:
    def __init__(self, config: RunConfig):
        self.config = config
        self.output_dir = Path(config.output_dir)
        self.net_cfg = config.net_config()
        self.samples: List[Sample] = []
        self.by_id: Dict[str, Sample] = {}
        self.id_samples: List[Sample] = []
        self.ood_samples: List[Sample] = []
        self.plan: Optional[CvPlan] = None
        self.forward_passes: Dict[str, int] = {}
        # wall-clock inference per method; kept out of report.json, which must be reproducible
        self.inference_seconds: Dict[str, float] = {}
        self.inference_samples: Dict[str, int] = {}

    # data and plan

    def write_config(self):
        self.output_dir.mkdir(parents=True, exist_ok=True)
        (self.output_dir / "config.json").write_text(
            json.dumps(self.config.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    def generate_data(self) -> Path:
        data_dir = self.config.resolved_data_dir()
        samples = generate(self.config.dataset, jobs=self.config.jobs)
        save_dataset(samples, data_dir)
        _write_json(data_dir / "dataset.json", self.config.dataset.model_dump(mode="json"))
        self._set_samples(samples)
        return data_dir

    def load_data(self):
        data_dir = self.config.resolved_data_dir()
        spec_path = data_dir / "dataset.json"
        if spec_path.exists():
            stored = json.loads(spec_path.read_text(encoding="utf-8"))
            if stored != self.config.dataset.model_dump(mode="json"):
                logger.warning(f"Dataset in {data_dir} was generated with a different spec; regenerating")
                self.generate_data()
                return
            self._set_samples(load_dataset(data_dir))
        else:
            logger.info(f"No dataset in {data_dir}; generating one")
            self.generate_data()

    def _set_samples(self, samples: Sequence[Sample]):
        self.samples = list(samples)
        self.by_id = {s.id: s for s in self.samples}
        self.id_samples, self.ood_samples = split_families(self.samples)
        logger.info(f"Dataset: {len(self.id_samples)} ID and {len(self.ood_samples)} OOD samples")

    def make_plan(self) -> CvPlan:
        cv = self.config.cv
        self.plan = make_cv_plan([s.id for s in self.id_samples], cv.n_folds, (cv.outer, cv.val, cv.test), cv.seed)
        _write_json(self.output_dir / "cv_plan.json", self.plan.to_dict())
        fold = self.plan.folds[cv.selected_fold]
        logger.info(f"CV plan: {cv.n_folds} folds, {len(fold.train_ids)} training ids per fold, "
                    f"outer holdout {self.plan.outer_holdout}")
        return self.plan

    def _pick(self, ids: Sequence[str]) -> List[Sample]:
        return [self.by_id[i] for i in ids]

    # training

    def fold_seed(self, k: int) -> int:
        return self.config.train.seed + 101 * k

    def train_or_load(self, directory: Path, ids: Sequence[str], val_ids: Sequence[str], seed: int,
                      net_cfg: NetConfig, tag: str) -> Params:
        """Train one model into `directory`, reusing it when an identical run is already there."""
        train_cfg = self.config.train.model_copy(update={"seed": seed})
        run = {
            "train": train_cfg.model_dump(mode="json"),
            "net": net_cfg.model_dump(mode="json"),
            "train_ids": list(ids),
            "val_ids": list(val_ids),
            "dataset_hash": config_hash(self.config.dataset),
        }
        config_path = directory / "config.json"
        if config_path.exists() and (directory / "manifest.json").exists():
            if json.loads(config_path.read_text(encoding="utf-8")) == run:
                logger.info(f"[{tag}] reusing trained parameters in {directory}")
                return load_params(directory)

        params, history = train_model(self._pick(ids), train_cfg, net_cfg, self._pick(val_ids), tag=tag)
        save_params(params, directory)
        _to_csv(pd.DataFrame(history, columns=["epoch", "train_loss", "val_loss"]), directory / "history.csv")
        _write_json(config_path, run)
        return params

    def _map(self, fn, items):
        if self.config.jobs > 1:
            with ThreadPoolExecutor(max_workers=self.config.jobs) as pool:
                return list(pool.map(fn, items))
        return [fn(item) for item in items]

    def train_folds(self, variants: Sequence[Tuple[str, bool]]) -> Dict[Tuple[int, str], Params]:
        """Train every (fold, variant); variants are (name, recon_branch) pairs sharing the fold seed."""
        jobs = [(k, name, recon) for k in self.config.cv.folds_to_run() for name, recon in variants]

        def run(job):
            k, name, recon = job
            fold = self.plan.folds[k]
            net_cfg = self.net_cfg.model_copy(update={"recon_branch": recon})
            directory = self.output_dir / "folds" / f"fold_{k:02d}" / name
            return self.train_or_load(directory, fold.train_ids, fold.val_ids, self.fold_seed(k), net_cfg,
                                      tag=f"fold {k} {name}")

        return dict(zip([(k, name) for k, name, _ in jobs], self._map(run, jobs)))

    def train_ensemble(self, k: int, directory: Path) -> List[Params]:
        n = self.config.uq.de_models
        if n == 1:
            logger.warning("de_models=1: a single-member ensemble gives DE uncertainty 0 for every sample")
        fold = self.plan.folds[k]
        seeds = ensemble_seeds(self.fold_seed(k) + 7, n)

        def run(m):
            return self.train_or_load(directory / f"member_{m:02d}", fold.train_ids, fold.val_ids, seeds[m],
                                      self.net_cfg, tag=f"fold {k} DE member {m + 1}/{n}")

        return self._map(run, range(n))

    # scoring

    def _count(self, method: str, fn):
        FORWARD_PASSES.reset()
        start = time.perf_counter()
        result = fn()
        elapsed = time.perf_counter() - start
        self.forward_passes.setdefault(method, FORWARD_PASSES.count)
        self.inference_seconds[method] = self.inference_seconds.get(method, 0.0) + elapsed
        self.inference_samples[method] = self.inference_samples.get(method, 0) + 1
        return result

    def score_single_model(self, params: Params, samples: Sequence[Sample], fold: Optional[int],
                           table: ScoreTable) -> Dict[str, Inference]:
        """RECON and every MCDO variant for one model; returns the eval-mode inferences."""
        uq = self.config.uq
        inferences = {}
        for s in samples:
            inference = self._count(RECON, lambda: predict_volume(params, s, self.config.train.patch_size))
            inferences[s.id] = inference
            error = dose_error(inference, s) if s.dose is not None else None
            table.add(s, RECON, recon_score(inference, s).value, error, fold)
            for p in uq.mcdo_probs:
                maps = self._count(mcdo_tag(p), lambda: mcdo_maps(
                    params, s, p, uq.mcdo_passes, seed=uq.seed + hash_index(s.id),
                    patch_size=self.config.train.patch_size, jobs=self.config.jobs,
                ))
                table.add(s, mcdo_tag(p), score_from_maps(maps, s, mcdo_tag(p)).value, error, fold)
        return inferences

    def score_ensemble(self, models: Sequence[Params], samples: Sequence[Sample], fold: Optional[int],
                       table: ScoreTable):
        for s in samples:
            maps = self._count(DE, lambda: ensemble_maps(models, s, self.config.train.patch_size,
                                                         jobs=self.config.jobs))
            error = dose_error(ensemble_mean(maps), s) if s.dose is not None else None
            table.add(s, DE, score_from_maps(maps, s, DE).value, error, fold)

    def dvh_rows(self, s: Sample, standard: Inference, recon: Inference) -> List[Dict]:
        truth = s.dose.data
        predictions = {
            "standard": np.clip(standard.dose_hat, 0.0, None) * DOSE_SCALE,
            "recon": np.clip(recon.dose_hat, 0.0, None) * DOSE_SCALE,
        }
        rows = []
        for name, mask in s.structures().items():
            if mask.count == 0:
                logger.warning(f"{s.id}: structure {name} is empty; skipped in DVH table")
                continue
            for metric in structure_metrics(name):
                row = {"sample_id": s.id, "structure": name, "metric": metric,
                       "ground_truth": dvh_metric(truth, mask, metric, name).value}
                for variant, dose in predictions.items():
                    row[variant] = dvh_metric(dose, mask, metric, name).value
                rows.append(row)
        return rows

    def ablation_table(self, models: Dict[Tuple[int, str], Params], standard: str = "standard",
                       recon: str = "recon") -> pd.DataFrame:
        rows = []
        for k in self.config.cv.folds_to_run():
            for s in self._pick(self.plan.folds[k].test_ids):
                rows += self.dvh_rows(
                    s,
                    predict_volume(models[(k, standard)], s, self.config.train.patch_size),
                    predict_volume(models[(k, recon)], s, self.config.train.patch_size),
                )
        return pd.DataFrame(rows, columns=DVH_COLUMNS)

    # reports

    def timing_table(self) -> pd.DataFrame:
        """Inference cost per method; `relative_to_recon` is the time gain of RECON over each method."""
        rows = []
        for method in sorted(self.inference_seconds):
            n = self.inference_samples[method]
            rows.append({"method": method, "samples": n, "forward_passes": self.forward_passes.get(method),
                         "seconds": self.inference_seconds[method],
                         "seconds_per_sample": self.inference_seconds[method] / n})
        frame = pd.DataFrame(rows, columns=TIMING_COLUMNS)
        recon = frame.loc[frame["method"] == RECON, "seconds_per_sample"]
        if len(recon) and float(recon.iloc[0]) > 0.0:
            frame["relative_to_recon"] = frame["seconds_per_sample"] / float(recon.iloc[0])
        return frame

    def write_timing(self) -> Path:
        path = self.output_dir / "timing.csv"
        frame = self.timing_table()
        _to_csv(frame, path)
        for row in frame.itertuples():
            logger.info(f"⏱️ {row.method}: {row.seconds_per_sample:.3f}s per sample, "
                        f"{row.forward_passes} forward passes")
        return path

    def provenance(self) -> Dict:
        return {
            "config_hash": config_hash(self.config, exclude=RUN_LOCATION_FIELDS),
            "seeds": self.config.seeds(),
            "folds": self.config.cv.folds_to_run(),
            "selected_fold": self.config.cv.selected_fold,
        }

    def evaluate(self, scores: pd.DataFrame, dvh: Optional[pd.DataFrame]) -> EvalReport:
        report = evaluate_scores(scores, dvh)
        report.forward_passes = dict(sorted(self.forward_passes.items()))
        report.provenance = self.provenance()
        write_report(report, self.output_dir)
        write_histograms(*score_distributions(scores), self.output_dir)
        return report


def hash_index(sample_id: str) -> int:
    """Stable integer from the whole sample id (Python's hash() is salted per process)."""
    return zlib.crc32(sample_id.encode("utf-8")) % (2 ** 31)


def score_distributions(scores: pd.DataFrame) -> Tuple[Dict[str, List[float]], Dict[str, List[float]]]:
    id_values, ood_values = {}, {}
    for (method, family), group in scores.groupby(["method", "family"], sort=True):
        target = id_values if family == "ID" else ood_values
        target[method] = group.sort_values("sample_id")["value"].astype(float).tolist()
    return id_values, ood_values


def evaluate_scores(scores: pd.DataFrame, dvh: Optional[pd.DataFrame] = None) -> EvalReport:
    """Build the report from a scores table (and optionally the ablation DVH table)."""
    id_rows = scores[(scores["family"] == "ID") & scores["dose_mse"].notna()]
    method_scores, method_errors = {}, {}
    for method, group in id_rows.groupby("method", sort=True):
        method_scores[method] = dict(zip(group["sample_id"], group["value"].astype(float)))
        method_errors[method] = dict(zip(group["sample_id"], group["dose_mse"].astype(float)))
    report = EvalReport()
    if method_scores:
        run_id_analysis(method_scores, {}, method_errors, report=report)
    id_values, ood_values = score_distributions(scores)
    run_ood_analysis(id_values, ood_values, report=report)
    if dvh is not None and len(dvh):
        run_branch_impact(dvh, report=report)
    return report


def _read_csv(path: Path) -> pd.DataFrame:
    if not path.exists():
        raise DataError(f"Missing {path.name} in {path.parent}")
    return pd.read_csv(path)


# subcommands

def cmd_gen_data(config: RunConfig) -> Path:
    runner = ExperimentRunner(config)
    with stage("gen-data"):
        return runner.generate_data()


def cmd_train(config: RunConfig, ensemble: bool = False) -> Path:
    """Train the reconstruction-branch model of the selected fold (and optionally its DE members)."""
    runner = ExperimentRunner(config)
    runner.write_config()
    k = config.cv.selected_fold
    with stage("data"):
        runner.load_data()
    with stage("cv"):
        runner.make_plan()
    with stage("train"):
        fold = runner.plan.folds[k]
        runner.train_or_load(runner.output_dir / "train", fold.train_ids, fold.val_ids, runner.fold_seed(k),
                             runner.net_cfg, tag=f"fold {k} recon")
    if ensemble:
        with stage("ensemble"):
            runner.train_ensemble(k, runner.output_dir / "ensemble")
    return runner.output_dir / "train"


def cmd_uq(config: RunConfig) -> Path:
    """Score the selected fold's held-out ID samples and the OOD set."""
    runner = ExperimentRunner(config)
    k = config.cv.selected_fold
    with stage("data"):
        runner.load_data()
    with stage("cv"):
        runner.make_plan()
    table = ScoreTable()
    with stage("uq"):
        params = load_params(runner.output_dir / "train")
        held_out = runner._pick(runner.plan.held_out(k))
        runner.score_single_model(params, held_out + runner.ood_samples, k, table)
        member_dirs = sorted((runner.output_dir / "ensemble").glob("member_*"))
        if member_dirs:
            models = [load_params(d) for d in member_dirs]
            runner.score_ensemble(models, held_out + runner.ood_samples, k, table)
        else:
            logger.warning("No ensemble members found; DE scores skipped (run 'train --ensemble' first)")
    path = runner.output_dir / "scores.csv"
    _to_csv(table.frame(), path)
    _write_json(runner.output_dir / "forward_passes.json", runner.forward_passes)
    runner.write_timing()
    logger.info(f"Wrote {len(table.rows)} scores to {path}")
    return path


def cmd_eval(config: RunConfig) -> Path:
    runner = ExperimentRunner(config)
    with stage("eval"):
        scores = _read_csv(runner.output_dir / "scores.csv")
        dvh_path = runner.output_dir / "dvh_metrics.csv"
        dvh = pd.read_csv(dvh_path) if dvh_path.exists() else None
        passes_path = runner.output_dir / "forward_passes.json"
        if passes_path.exists():
            runner.forward_passes = json.loads(passes_path.read_text(encoding="utf-8"))
        runner.evaluate(scores, dvh)
    return runner.output_dir / "report.json"


def cmd_ablation(config: RunConfig, control: bool = False) -> Path:
    """Train with and without the reconstruction branch on identical seeds and
    compare DVH errors per structure and metric. With `control`, both arms use
    the reconstruction branch, so every test must return p = 1."""
    runner = ExperimentRunner(config)
    runner.write_config()
    with stage("data"):
        runner.load_data()
    with stage("cv"):
        runner.make_plan()
    variants = [("recon", True)] if control else [("standard", False), ("recon", True)]
    with stage("ablation-train"):
        models = runner.train_folds(variants)
    with stage("ablation-eval"):
        dvh = runner.ablation_table(models, standard="recon" if control else "standard")
        name = "dvh_metrics_control.csv" if control else "dvh_metrics.csv"
        _to_csv(dvh, runner.output_dir / name)
        report = run_branch_impact(dvh)
        report.provenance = runner.provenance()
        table = runner.output_dir / ("table1_control.csv" if control else "table1.csv")
        _to_csv(dvh_impact_table(report.dvh_impact), table)
    logger.info(f"Ablation table written to {table}")
    return table


def cmd_pipeline(config: RunConfig) -> Path:
    runner = ExperimentRunner(config)
    runner.write_config()
    cv = config.cv
    selected = cv.selected_fold

    with stage("data"):
        runner.load_data()
    with stage("cv"):
        runner.make_plan()
    with stage("cv-train"):
        models = runner.train_folds([("standard", False), ("recon", True)])

    table = ScoreTable()
    with stage("uq-id"):
        for k in cv.folds_to_run():
            runner.score_single_model(models[(k, "recon")], runner._pick(runner.plan.folds[k].test_ids), k, table)
    with stage("ablation-eval"):
        dvh = runner.ablation_table(models)
        _to_csv(dvh, runner.output_dir / "dvh_metrics.csv")

    with stage("ensemble"):
        de_folds = cv.folds_to_run() if config.uq.de_all_folds else [selected]
        ensembles = {k: runner.train_ensemble(k, runner.output_dir / "folds" / f"fold_{k:02d}" / "ensemble")
                     for k in de_folds}
        for k, members in ensembles.items():
            ids = runner.plan.folds[k].test_ids if config.uq.de_all_folds else runner.plan.held_out(k)
            runner.score_ensemble(members, runner._pick(ids), k, table)

    with stage("uq-ood"):
        if runner.ood_samples:
            runner.score_single_model(models[(selected, "recon")], runner.ood_samples, selected, table)
            runner.score_ensemble(ensembles[selected], runner.ood_samples, selected, table)
        else:
            logger.warning("Dataset has no OOD samples; OOD analysis skipped")

    scores = table.frame()
    _to_csv(scores, runner.output_dir / "scores.csv")
    runner.write_timing()
    with stage("eval"):
        report = runner.evaluate(scores, dvh)

    for method, res in report.pearson.items():
        logger.info(f"📊 {method}: r={res.r:.3f} p={res.p:.2e}")
    for method, res in report.ood.items():
        logger.info(f"📈 {method}: Z={res.z_score:.3f} overlap={res.overlap_count}")
    logger.info(f"✅ Pipeline finished; results in {runner.output_dir}")
    return runner.output_dir / "report.json"
