"""AUROC evaluation of reconstruction scores with class-balancing undersampling."""

import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import FormatError, InvalidInputError, MissingScoresError
from .fsutil import read_csv, write_csv, write_json, write_text
from .imaging import IN_DISTRIBUTION, OOD

HIGHER_IS_OOD = "higher-is-OOD"
LOWER_IS_OOD = "lower-is-OOD"
ORIENTATIONS = (HIGHER_IS_OOD, LOWER_IS_OOD)
METRICS = ("wd", "mse", "ssim")
DEFAULT_ORIENTATIONS = {"wd": HIGHER_IS_OOD, "mse": HIGHER_IS_OOD, "ssim": LOWER_IS_OOD}
MANIFEST_COLUMNS = ("image_id", "path", "dataset", "class")

TABLE_HEADERS = ("Dataset", "WD-based AUROC", "MSE-based AUROC", "SSIM-based AUROC (raw)",
                 "SSIM-based AUROC (lower-is-OOD)")


def _finite_scores(x, name):
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise InvalidInputError(f"{name} scores are empty")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{name} scores contain non-finite values")
    return x


def auroc(ood_scores, id_scores, orientation=HIGHER_IS_OOD) -> float:
    """Mann-Whitney AUROC: P(ood > id) + 0.5 P(ood == id).

    Midranks make the rank-sum statistic tie-exact; every intermediate is a
    multiple of 0.5, so the result equals brute-force pair counting exactly.
    """
    if orientation not in ORIENTATIONS:
        raise InvalidInputError(f"unknown orientation {orientation!r}")
    pos = _finite_scores(ood_scores, "OOD")
    neg = _finite_scores(id_scores, "in-distribution")
    if orientation == LOWER_IS_OOD:
        pos, neg = -pos, -neg
    allv = np.concatenate([pos, neg])
    uniq, inverse, counts = np.unique(allv, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    # doubled midrank of each distinct value: (first + last) for 1-based ranks
    twice_mid = 2 * upper - counts + 1
    rank_sum_x2 = int(np.sum(twice_mid[inverse[: pos.size]]))
    u_x2 = rank_sum_x2 - pos.size * (pos.size + 1)
    return (u_x2 / 2) / (pos.size * neg.size)


def undersample(records, n_target, seed):
    """Uniform draw of ``n_target`` records without replacement, kept in input order."""
    records = list(records)
    if n_target > len(records):
        raise InvalidInputError(f"cannot draw {n_target} of {len(records)} records")
    if n_target < 0:
        raise InvalidInputError("n_target must be non-negative")
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(len(records), size=n_target, replace=False))
    return [records[i] for i in picked]


@dataclass
class RocResult:
    auroc: float
    n_pos: int
    n_neg: int
    seed: int
    metric: str
    orientation: str


@dataclass
class DatasetRow:
    dataset: str
    n_ood: int
    n_id: int
    seed: int
    results: dict  # metric -> RocResult under the configured orientation
    ssim_raw: RocResult  # raw SSIM scored higher-is-OOD, the convention of the published table
    ssim_lower: RocResult

    def table_values(self):
        return [self.results["wd"].auroc, self.results["mse"].auroc, self.ssim_raw.auroc, self.ssim_lower.auroc]


@dataclass
class Report:
    rows: list
    seed: int
    orientations: dict
    id_dataset: str
    n_id_available: int

    def csv_rows(self):
        out = []
        for r in self.rows:
            wd, mse, raw, lower = r.table_values()
            out.append([r.dataset, str(r.n_ood), str(r.n_id), repr(wd), repr(mse), repr(raw), repr(lower)])
        return out

    def to_text(self):
        cells = [list(TABLE_HEADERS)]
        for r in self.rows:
            cells.append([r.dataset] + [f"{v:.2f}" for v in r.table_values()])
        widths = [max(len(row[i]) for row in cells) for i in range(len(cells[0]))]
        lines = []
        for k, row in enumerate(cells):
            lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))))
            if k == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def to_json(self):
        return {
            "seed": self.seed,
            "orientations": dict(self.orientations),
            "table_ssim_column": "raw SSIM scored higher-is-OOD",
            "id_dataset": self.id_dataset,
            "n_id_available": self.n_id_available,
            "rows": [
                {
                    "dataset": r.dataset,
                    "n_ood": r.n_ood,
                    "n_id": r.n_id,
                    "undersample_seed": r.seed,
                    "results": {m: asdict(res) for m, res in r.results.items()},
                    "ssim_raw": asdict(r.ssim_raw),
                    "ssim_lower_is_ood": asdict(r.ssim_lower),
                }
                for r in self.rows
            ],
        }


REPORT_COLUMNS = ("dataset", "n_ood", "n_id", "wd_auroc", "mse_auroc", "ssim_auroc_raw", "ssim_auroc_lower_is_ood")


def dataset_seed(seed, index) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def evaluate_experiment(manifest, scores, seed=0, orientations=None) -> Report:
    """Per-OOD-dataset AUROCs for each metric, against an undersampled in-distribution set.

    ``manifest`` is a list of dicts with ``image_id``, ``dataset`` and ``class``
    (``in-distribution`` or ``ood``). One in-distribution subset is drawn per OOD
    dataset and shared by all metrics.

    Raises:
        MissingScoresError: a manifest entry has no score record.
    """
    orientations = {**DEFAULT_ORIENTATIONS, **(orientations or {})}
    for m, o in orientations.items():
        if m not in METRICS or o not in ORIENTATIONS:
            raise InvalidInputError(f"bad orientation {m}={o}")
    by_id = {s.image_id: s for s in scores}
    missing = [e["image_id"] for e in manifest if e["image_id"] not in by_id]
    if missing:
        raise MissingScoresError(missing)

    id_records, ood_by_dataset, id_datasets = [], {}, []
    for e in manifest:
        rec = by_id[e["image_id"]]
        if e["class"] == IN_DISTRIBUTION:
            id_records.append(rec)
            if e["dataset"] not in id_datasets:
                id_datasets.append(e["dataset"])
        elif e["class"] == OOD:
            ood_by_dataset.setdefault(e["dataset"], []).append(rec)
        else:
            raise InvalidInputError(f"unknown class {e['class']!r} for {e['image_id']}")
    if not id_records:
        raise InvalidInputError("manifest has no in-distribution entries")

    rows = []
    for k, (name, ood) in enumerate(ood_by_dataset.items()):
        s = dataset_seed(seed, k)
        ref = undersample(id_records, len(ood), s)
        results = {}
        for m in METRICS:
            pos = [getattr(r, m) for r in ood]
            neg = [getattr(r, m) for r in ref]
            results[m] = RocResult(auroc(pos, neg, orientations[m]), len(pos), len(neg), s, m, orientations[m])
        pos, neg = [r.ssim for r in ood], [r.ssim for r in ref]
        raw, lower = (RocResult(auroc(pos, neg, o), len(pos), len(neg), s, "ssim", o)
                      for o in (HIGHER_IS_OOD, LOWER_IS_OOD))
        rows.append(DatasetRow(name, len(ood), len(ref), s, results, raw, lower))
    return Report(rows, int(seed), orientations, ",".join(id_datasets), len(id_records))


def write_report(report: Report, out_dir, stem="report"):
    write_csv(os.path.join(out_dir, f"{stem}.csv"), REPORT_COLUMNS, report.csv_rows())
    write_text(os.path.join(out_dir, f"{stem}.txt"), report.to_text())
    write_json(os.path.join(out_dir, f"{stem}.json"), report.to_json())


# ---------------------------------------------------------------------- manifests


def read_manifest(path, check_paths=True):
    rows = read_csv(path)
    if rows and tuple(rows[0].keys()) != MANIFEST_COLUMNS:
        raise FormatError(f"{path}: expected columns {','.join(MANIFEST_COLUMNS)}")
    base = os.path.dirname(os.path.abspath(path))
    seen, classes = set(), {}
    for r in rows:
        if r["image_id"] in seen:
            raise InvalidInputError(f"{path}: duplicate image id {r['image_id']}")
        seen.add(r["image_id"])
        if classes.setdefault(r["dataset"], r["class"]) != r["class"]:
            raise InvalidInputError(f"{path}: dataset {r['dataset']} maps to more than one class")
        if check_paths and not os.path.exists(os.path.join(base, r["path"])):
            raise InvalidInputError(f"{path}: missing file {r['path']} for {r['image_id']}")
    return rows


def write_manifest(path, entries):
    write_csv(path, MANIFEST_COLUMNS, [[e[c] for c in MANIFEST_COLUMNS] for e in entries])
