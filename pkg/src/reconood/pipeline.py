"""Pipeline stages over directories of PNGs, and the single-config experiment runner.

Directory conventions (all names relative to a stage's output directory):

* phantom corpus: ``NNNNN.png`` 16-bit HU images (+1024 offset) and ``manifest.csv``
  with ``path,label,anomaly_kind,seed``.
* preprocessed corpus: ``NNNNN.png`` 8-bit windowed images, ``masks/NNNNN.png``
  body masks, and the corpus ``manifest.csv`` copied through.
* reconstructions: ``NNNNN.png`` (quantized), ``NNNNN.npy`` (float32, what gets
  scored) and ``NNNNN.json`` sidecar.

Every stage writes ``run_manifest.json`` next to its outputs.
"""

import concurrent.futures
import datetime
import logging
import os
import shutil
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import WEIGHT_FORMAT_VERSION, __version__
from .errors import ConfigError, InvalidInputError
from .evaluation import (DEFAULT_ORIENTATIONS, METRICS, ORIENTATIONS, evaluate_experiment,
                         write_manifest, write_report)
from .fsutil import atomic_path, read_csv, write_csv, write_json
from .generator import GeneratorConfig, load_weights, save_weights
from .imaging import (IN_DISTRIBUTION, OOD, AnomalyKind, WindowSpec, corpus_seed, extract_body_mask, gen_phantom,
                      load_hu_png, load_mask_png, load_png, quantize, sample_phantom_spec, save_hu_png,
                      save_mask_png, save_png, window_ct)
from .metrics import score_reconstruction, write_scores
from .projection import ProjectionConfig, project
from .training import TrainConfig, train_glo

log = logging.getLogger(__name__)

PHANTOM_MANIFEST_COLUMNS = ("path", "label", "anomaly_kind", "seed")


def default_jobs():
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)


def write_run_manifest(out_dir, command, config, seeds):
    write_json(os.path.join(out_dir, "run_manifest.json"), {
        "tool": "reconood",
        "version": __version__,
        "weight_format_version": WEIGHT_FORMAT_VERSION,
        "command": command,
        "config": config,
        "seeds": seeds,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    })


def _require_dir(path, what):
    if not os.path.isdir(path):
        raise InvalidInputError(f"{what} directory not found: {path}")


def list_images(directory):
    _require_dir(directory, "input")
    return sorted(f for f in os.listdir(directory) if f.endswith(".png") and not f.startswith("."))


# ----------------------------------------------------------------------- phantoms


def generate_corpus(out_dir, count, resolution=64, anomaly=AnomalyKind.NONE, seed=0, noise_hu=None):
    """Write ``count`` HU phantoms and their manifest; returns the manifest rows."""
    if count < 0:
        raise InvalidInputError("count must be non-negative")
    anomaly = AnomalyKind(anomaly)
    rows = []
    for i in range(count):
        extra = {} if noise_hu is None else {"noise_hu": float(noise_hu)}
        spec = sample_phantom_spec(corpus_seed(seed, i), resolution, anomaly, **extra)
        hu, _, label = gen_phantom(spec)
        name = f"{i:05d}.png"
        save_hu_png(hu, os.path.join(out_dir, name))
        rows.append([name, label, anomaly.value, str(spec.seed)])
    write_csv(os.path.join(out_dir, "manifest.csv"), PHANTOM_MANIFEST_COLUMNS, rows)
    write_run_manifest(out_dir, "phantom-gen",
                       {"count": count, "resolution": resolution, "anomaly": anomaly.value, "noise_hu": noise_hu},
                       {"seed": seed})
    return rows


def preprocess_dir(in_dir, out_dir, window=WindowSpec(), mask_threshold=10.0):
    """Window, quantize and mask every HU PNG of ``in_dir``."""
    names = list_images(in_dir)
    if os.path.abspath(in_dir) == os.path.abspath(out_dir):
        raise InvalidInputError("preprocess output directory must differ from its input")
    for name in names:
        grid = quantize(window_ct(load_hu_png(os.path.join(in_dir, name)), window))
        save_png(grid, os.path.join(out_dir, name))
        save_mask_png(extract_body_mask(grid, mask_threshold), os.path.join(out_dir, "masks", name))
    src_manifest = os.path.join(in_dir, "manifest.csv")
    if os.path.exists(src_manifest):
        with atomic_path(os.path.join(out_dir, "manifest.csv")) as tmp:
            shutil.copyfile(src_manifest, tmp)
    write_run_manifest(out_dir, "preprocess",
                       {"in": os.path.abspath(in_dir), "level": window.level, "width": window.width,
                        "mask_threshold": mask_threshold}, {})
    return names


# ----------------------------------------------------------------------- training


def load_corpus(dirs):
    images = []
    for d in dirs:
        images += [load_png(os.path.join(d, n)) for n in list_images(d)]
    return images


def train_from_dirs(dirs, out_path, gen_config=GeneratorConfig(), train_config=TrainConfig()):
    corpus = load_corpus(dirs)
    state = train_glo(corpus, gen_config, train_config)
    save_weights(state.best_params, out_path, seed=train_config.seed, metadata={
        "train": train_config.to_dict(),
        "best_epoch": state.best_epoch,
        "best_val_loss": state.best_val_loss,
        "epochs": state.epoch,
        "n_images": len(corpus),
    })
    write_run_manifest(os.path.dirname(os.path.abspath(out_path)), "train",
                       {"in": [os.path.abspath(d) for d in dirs], "generator": gen_config.to_dict(),
                        "train": train_config.to_dict(), "weights": os.path.abspath(out_path)},
                       {"seed": train_config.seed})
    return state


# --------------------------------------------------------------------- projection


def image_seed(seed, stem) -> int:
    return int(np.random.SeedSequence([int(seed), zlib.crc32(stem.encode("utf-8"))]).generate_state(1)[0])


_WORKER = {}


def _init_worker(weights_path):
    _WORKER["params"] = load_weights(weights_path)


def _project_one(job):
    name, in_dir, mask_dir, config = job
    params = _WORKER["params"]
    stem = os.path.splitext(name)[0]
    target = load_png(os.path.join(in_dir, name))
    mask = load_mask_png(os.path.join(mask_dir, name))
    result = project(params, target, mask, config, seed=image_seed(config.seed, stem))
    return name, result


def _parallel_map(fn, jobs, n_jobs, initializer, initargs):
    """Ordered map; results come back in input order whatever the worker count."""
    if n_jobs <= 1 or len(jobs) <= 1:
        initializer(*initargs)
        return [fn(j) for j in jobs]
    with concurrent.futures.ProcessPoolExecutor(max_workers=n_jobs, initializer=initializer,
                                                initargs=initargs) as pool:
        return list(pool.map(fn, jobs))


def project_dir(weights_path, in_dir, mask_dir, out_dir, config=ProjectionConfig(), jobs=1):
    names = list_images(in_dir)
    _require_dir(mask_dir, "mask")
    for n in names:
        if not os.path.exists(os.path.join(mask_dir, n)):
            raise InvalidInputError(f"no mask for {n} in {mask_dir}")
    work = [(n, in_dir, mask_dir, config) for n in names]
    results = _parallel_map(_project_one, work, jobs, _init_worker, (weights_path,))
    os.makedirs(out_dir, exist_ok=True)
    for name, res in results:
        stem = os.path.splitext(name)[0]
        save_png(quantize(np.clip(res.reconstruction, 0, 255)), os.path.join(out_dir, name))
        with atomic_path(os.path.join(out_dir, stem + ".npy")) as tmp:
            with open(tmp, "wb") as fh:
                np.save(fh, res.reconstruction.astype(np.float32))
        write_json(os.path.join(out_dir, stem + ".json"), {
            "image": name,
            "final_loss": res.best_loss,
            "best_step": res.best_step,
            "steps": res.steps,
            "seed": res.seed,
            "latent": [float(v) for v in res.latent],
            "config": config.to_dict(),
        })
    write_run_manifest(out_dir, "project",
                       {"weights": os.path.abspath(weights_path), "in": os.path.abspath(in_dir),
                        "mask_dir": os.path.abspath(mask_dir), "projection": config.to_dict()},
                       {"seed": config.seed})
    return results


# ------------------------------------------------------------------------ scoring


def load_reconstruction(recon_dir, name):
    stem = os.path.splitext(name)[0]
    npy = os.path.join(recon_dir, stem + ".npy")
    if os.path.exists(npy):
        return np.load(npy).astype(np.float64)
    return load_png(os.path.join(recon_dir, name))


def score_dir(in_dir, recon_dir, mask_dir, dataset):
    records = []
    for name in list_images(in_dir):
        stem = os.path.splitext(name)[0]
        if not (os.path.exists(os.path.join(recon_dir, stem + ".npy"))
                or os.path.exists(os.path.join(recon_dir, name))):
            raise InvalidInputError(f"no reconstruction for {name} in {recon_dir}")
        records.append(score_reconstruction(
            load_png(os.path.join(in_dir, name)),
            load_reconstruction(recon_dir, name),
            load_mask_png(os.path.join(mask_dir, name)),
            image_id=f"{dataset}/{stem}",
            dataset=dataset,
        ))
    return records


def manifest_entries(in_dir, dataset, cls=None, base_dir=None):
    """Evaluation-manifest rows for a preprocessed corpus directory.

    The class comes from ``cls`` or else from the corpus manifest's label column.
    """
    labels = {}
    corpus_manifest = os.path.join(in_dir, "manifest.csv")
    if os.path.exists(corpus_manifest):
        labels = {r["path"]: r["label"] for r in read_csv(corpus_manifest)}
    base_dir = base_dir or in_dir
    entries = []
    for name in list_images(in_dir):
        c = cls or labels.get(name)
        if c not in (IN_DISTRIBUTION, OOD):
            raise InvalidInputError(f"class of {name} unknown; pass it explicitly")
        entries.append({
            "image_id": f"{dataset}/{os.path.splitext(name)[0]}",
            "path": os.path.relpath(os.path.join(in_dir, name), base_dir),
            "dataset": dataset,
            "class": c,
        })
    return entries


# --------------------------------------------------------------- experiment config


ROLES = ("train", "id", "ood")


@dataclass(frozen=True)
class CorpusConfig:
    name: str
    role: str
    count: int
    seed: int
    anomaly: AnomalyKind = AnomalyKind.NONE


@dataclass
class ExperimentConfig:
    out_dir: str
    corpora: list
    resolution: int = 64
    window: WindowSpec = WindowSpec()
    mask_threshold: float = 10.0
    noise_hu: float = None
    generator: GeneratorConfig = GeneratorConfig()
    training: TrainConfig = TrainConfig()
    projection: ProjectionConfig = ProjectionConfig()
    eval_seed: int = 0
    orientations: dict = field(default_factory=lambda: dict(DEFAULT_ORIENTATIONS))
    weights: str = None
    jobs: int = 1

    @classmethod
    def from_dict(cls, d, base_dir="."):
        """Build a config from parsed JSON; every seed must be present."""
        d = dict(d)
        try:
            missing = [k for k in ("out_dir", "corpora") if k not in d]
            if missing:
                raise ConfigError(f"config lacks {', '.join(missing)}")
            corpora = []
            for c in d.pop("corpora"):
                if "seed" not in c:
                    raise ConfigError(f"corpus {c.get('name')!r} needs a seed")
                role = c.get("role")
                if role not in ROLES:
                    raise ConfigError(f"corpus role must be one of {ROLES}, got {role!r}")
                anomaly = AnomalyKind(c.get("anomaly", "none"))
                corpora.append(CorpusConfig(c["name"], role, int(c["count"]), int(c["seed"]), anomaly))
            names = [c.name for c in corpora]
            if len(set(names)) != len(names):
                raise ConfigError("corpus names must be unique")
            if not any(c.role == "id" for c in corpora) or not any(c.role == "ood" for c in corpora):
                raise ConfigError("need at least one 'id' and one 'ood' corpus")
            weights = d.get("weights")
            if weights is None and not any(c.role == "train" for c in corpora):
                raise ConfigError("need a 'train' corpus or a 'weights' file")
            resolution = int(d.get("resolution", 64))
            gen = dict(d.get("generator", {}))
            gen.setdefault("output_resolution", resolution)
            generator = GeneratorConfig.from_dict({**GeneratorConfig().to_dict(), **gen})
            if generator.output_resolution != resolution:
                raise ConfigError("generator output_resolution must equal resolution")
            sections = {}
            for key, klass in (("training", TrainConfig), ("projection", ProjectionConfig)):
                sec = d.get(key, {})
                if weights is not None and key == "training":
                    sec = {"seed": 0, **sec}
                if "seed" not in sec:
                    raise ConfigError(f"'{key}' section needs a seed")
                sections[key] = klass(**sec)
            ev = d.get("evaluation", {})
            if "seed" not in ev:
                raise ConfigError("'evaluation' section needs a seed")
            orientations = {**DEFAULT_ORIENTATIONS, **ev.get("orientations", {})}
            for m, o in orientations.items():
                if m not in METRICS or o not in ORIENTATIONS:
                    raise ConfigError(f"bad orientation {m}={o}")
            window = WindowSpec(**d.get("window", {}))
            unknown = set(d) - {"out_dir", "resolution", "window", "mask_threshold", "noise_hu", "generator",
                                "training", "projection", "evaluation", "weights", "jobs"}
            if unknown:
                raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
            return cls(
                out_dir=os.path.join(base_dir, d["out_dir"]),
                corpora=corpora,
                resolution=resolution,
                window=window,
                mask_threshold=float(d.get("mask_threshold", 10.0)),
                noise_hu=d.get("noise_hu"),
                generator=generator,
                training=sections["training"],
                projection=sections["projection"],
                eval_seed=int(ev["seed"]),
                orientations=orientations,
                weights=None if weights is None else os.path.join(base_dir, weights),
                jobs=int(d.get("jobs", 1)),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from exc

    def to_dict(self):
        return {
            "out_dir": self.out_dir,
            "corpora": [{"name": c.name, "role": c.role, "count": c.count, "seed": c.seed,
                         "anomaly": c.anomaly.value} for c in self.corpora],
            "resolution": self.resolution,
            "window": {"level": self.window.level, "width": self.window.width},
            "mask_threshold": self.mask_threshold,
            "noise_hu": self.noise_hu,
            "generator": self.generator.to_dict(),
            "training": self.training.to_dict(),
            "projection": self.projection.to_dict(),
            "evaluation": {"seed": self.eval_seed, "orientations": self.orientations},
            "weights": self.weights,
            "jobs": self.jobs,
        }


def run_pipeline(cfg: ExperimentConfig):
    """Run every stage; returns the evaluation report."""
    out = cfg.out_dir
    image_dirs = {}
    for c in cfg.corpora:
        raw = os.path.join(out, "phantoms", c.name)
        log.info("generating %d phantoms for %s", c.count, c.name)
        generate_corpus(raw, c.count, cfg.resolution, c.anomaly, c.seed, cfg.noise_hu)
        image_dirs[c.name] = os.path.join(out, "images", c.name)
        preprocess_dir(raw, image_dirs[c.name], cfg.window, cfg.mask_threshold)

    weights = cfg.weights
    if weights is None:
        weights = os.path.join(out, "weights.rgen")
        log.info("training generator")
        train_from_dirs([image_dirs[c.name] for c in cfg.corpora if c.role == "train"], weights,
                        cfg.generator, cfg.training)

    records, entries = [], []
    for c in cfg.corpora:
        if c.role == "train":
            continue
        d = image_dirs[c.name]
        recon = os.path.join(out, "recon", c.name)
        log.info("projecting %s", c.name)
        project_dir(weights, d, os.path.join(d, "masks"), recon, cfg.projection, cfg.jobs)
        records += score_dir(d, recon, os.path.join(d, "masks"), c.name)
        entries += manifest_entries(d, c.name, IN_DISTRIBUTION if c.role == "id" else OOD, base_dir=out)

    write_scores(os.path.join(out, "scores.csv"), records)
    write_manifest(os.path.join(out, "eval_manifest.csv"), entries)
    report = evaluate_experiment(entries, records, cfg.eval_seed, cfg.orientations)
    write_report(report, out)
    write_run_manifest(out, "pipeline", cfg.to_dict(), {
        "corpora": {c.name: c.seed for c in cfg.corpora},
        "training": cfg.training.seed,
        "projection": cfg.projection.seed,
        "evaluation": cfg.eval_seed,
    })
    return report
