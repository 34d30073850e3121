"""Two-stage random hyperparameter search and the evaluation metric suite."""

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, NumericalFault, SearchFault
from .nn import TrainConfig, classify, convlstm_spec, lstm_spec, train

FAMILIES = ("lstm", "convlstm")


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f_measure: float
    TP: int
    FP: int
    TN: int
    FN: int
    training_time: float = None
    mean_prediction_time: float = None

    @property
    def total(self):
        return self.TP + self.FP + self.TN + self.FN

    @property
    def confusion(self):
        return {"TP": self.TP, "FP": self.FP, "TN": self.TN, "FN": self.FN}

    def scores(self):
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
                "f_measure": self.f_measure}

    def to_json(self, include_timing=True):
        d = {"scores": self.scores(), "confusion": self.confusion, "total": self.total}
        if include_timing:
            d["timing"] = {"training_time_s": self.training_time, "mean_prediction_time_s": self.mean_prediction_time}
        return json.dumps(d, indent=2, sort_keys=True)


def metrics_from_confusion(TP, FN, TN, FP, training_time=None, mean_prediction_time=None):
    """Percent scores from confusion counts; undefined ratios are reported as 0."""
    TP, FN, TN, FP = (int(v) for v in (TP, FN, TN, FP))
    if min(TP, FN, TN, FP) < 0:
        raise ConfigError("confusion counts must be non-negative")
    total = TP + FN + TN + FP
    acc = 100.0 * (TP + TN) / total if total else 0.0
    prec = 100.0 * TP / (TP + FP) if TP + FP else 0.0
    rec = 100.0 * TP / (TP + FN) if TP + FN else 0.0
    f = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return Metrics(acc, prec, rec, f, TP, FP, TN, FN, training_time, mean_prediction_time)


def confusion(y_true, y_pred):
    y_true = np.asarray(y_true).astype(int)
    y_pred = np.asarray(y_pred).astype(int)
    return dict(TP=int(((y_pred == 1) & (y_true == 1)).sum()), FN=int(((y_pred == 0) & (y_true == 1)).sum()),
                TN=int(((y_pred == 0) & (y_true == 0)).sum()), FP=int(((y_pred == 1) & (y_true == 0)).sum()))


def _as_net(model):
    return model.network() if hasattr(model, "network") else model


def _features(checkpoint, data):
    if isinstance(data, tuple):
        x, y = data
        return np.asarray(x, dtype=float), np.asarray(y)
    bounds = getattr(checkpoint, "meta", {}).get("bounds")
    return data.features(None if bounds is None else tuple(bounds)), data.labels


def _timed_latency(net, x, n=32):
    n = min(n, len(x))
    if n == 0:
        return None
    t0 = time.perf_counter()
    for i in range(n):
        net.forward(x[i:i + 1])
    return (time.perf_counter() - t0) / n


def evaluate(checkpoint, test_set, threshold=0.5, timing_samples=32):
    """Confusion matrix and scores of a checkpoint on a Dataset or (x, y) pair."""
    net = _as_net(checkpoint)
    x, y = _features(checkpoint, test_set)
    if len(y) == 0:
        raise ConfigError("empty test set")
    p = net.predict_proba(x)
    cm = confusion(y, classify(p, threshold))
    train_time = getattr(checkpoint, "meta", {}).get("training_time_s")
    return metrics_from_confusion(**cm, training_time=train_time,
                                  mean_prediction_time=_timed_latency(net, np.asarray(x, float), timing_samples))


def early_detection_probe(checkpoint, windows, threshold=0.5):
    """Recall on attack windows and false positives on benign ones, no retraining."""
    net = _as_net(checkpoint)
    x, y = _features(checkpoint, windows)
    yhat = classify(net.predict_proba(x), threshold)
    pos = y == 1
    neg = ~pos
    recall = float(100.0 * yhat[pos].mean()) if pos.any() else None
    fp = int(yhat[neg].sum())
    return {"recall": recall, "recall_display": "N/A" if recall is None else f"{recall:.3f}",
            "false_positives": fp, "n_normal": int(neg.sum()), "n_attack": int(pos.sum()),
            "fp_rate": float(fp / neg.sum()) if neg.any() else 0.0}


# ---- tables -----------------------------------------------------------------

def format_table(results):
    """Text table with one column per model: scores, confusion and timing blocks."""
    names = list(results)
    w = max(12, *(len(n) + 2 for n in names))
    lines = ["Metric".ljust(14) + "".join(n.rjust(w) for n in names)]
    for key, label in (("accuracy", "Accuracy"), ("f_measure", "F-measure"), ("recall", "Recall"),
                       ("precision", "Precision")):
        lines.append(label.ljust(14) + "".join(f"{getattr(results[n], key):.3f}".rjust(w) for n in names))
    lines.append("")
    for key in ("TN", "FP", "FN", "TP"):
        lines.append(key.ljust(14) + "".join(str(getattr(results[n], key)).rjust(w) for n in names))
    if any(results[n].training_time is not None for n in names):
        lines.append("")
        lines.append("Training (s)".ljust(14) + "".join(_fmt_opt(results[n].training_time, 1).rjust(w) for n in names))
        lines.append("Predict (s)".ljust(14) + "".join(_fmt_opt(results[n].mean_prediction_time, 4).rjust(w)
                                                        for n in names))
    return "\n".join(lines)


def _fmt_opt(v, nd):
    return "-" if v is None else f"{v:.{nd}f}"


def format_hyperparameters(configs):
    """Table of tuned hyperparameters, one column per model."""
    names = list(configs)
    keys = []
    for n in names:
        for k in configs[n]:
            if k not in keys:
                keys.append(k)
    w = max(12, *(len(n) + 2 for n in names))
    lines = ["Hyperparameter".ljust(16) + "".join(n.rjust(w) for n in names)]
    for k in keys:
        lines.append(k.ljust(16) + "".join(str(configs[n].get(k, "-")).rjust(w) for n in names))
    return "\n".join(lines)


# ---- search -----------------------------------------------------------------

@dataclass
class SearchSpace:
    learning_rate: tuple = (1e-4, 2e-2)     # log-uniform
    dropout: tuple = (0.1, 0.5)
    batch: tuple = (16, 64)
    units: tuple = (16, 200)
    epochs: tuple = (4, 8)
    filters: tuple = (2, 8)
    kernel: tuple = (3, 7)

    def __post_init__(self):
        for name in ("learning_rate", "dropout", "batch", "units", "epochs", "filters", "kernel"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"empty range for {name}")
        if self.learning_rate[0] <= 0:
            raise ConfigError("learning-rate bounds must be positive")

    def keys(self, family):
        common = ["learning_rate", "dropout", "batch", "epochs"]
        if family == "lstm":
            return common + ["units1", "units2", "units3"]
        if family == "convlstm":
            return common + ["units2", "filters1", "kernel1", "filters2", "kernel2"]
        raise ConfigError(f"unknown family {family!r}")

    def bounds(self, key):
        base = key.rstrip("0123456789")
        return {"learning_rate": self.learning_rate, "dropout": self.dropout, "batch": self.batch,
                "units": self.units, "epochs": self.epochs, "filters": self.filters,
                "kernel": self.kernel}[base]

    @staticmethod
    def is_int(key):
        return key not in ("learning_rate", "dropout")

    def sample(self, family, rng):
        hp = {}
        for k in self.keys(family):
            lo, hi = self.bounds(k)
            if k == "learning_rate":
                hp[k] = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
            elif self.is_int(k):
                hp[k] = int(rng.integers(lo, hi + 1))
            else:
                hp[k] = float(rng.uniform(lo, hi))
        return hp

    def contains(self, family, hp):
        for k in self.keys(family):
            lo, hi = self.bounds(k)
            if not lo <= hp[k] <= hi:
                return False
        return True


# Reference configurations (learning rate, drop rate, batch, units, epochs, filters, kernels).
REFERENCE_CONFIGS = {
    ("lstm", 5): dict(learning_rate=0.014717, dropout=0.34, batch=56, units1=146, units2=180, units3=32, epochs=5),
    ("lstm", 10): dict(learning_rate=0.00070810, dropout=0.2, batch=40, units1=119, units2=104, units3=32, epochs=6),
    ("convlstm", 5): dict(learning_rate=0.0001939, dropout=0.2, batch=30, units1=150, units2=32, epochs=6,
                          filters1=4, kernel1=6, filters2=8, kernel2=5),
    ("convlstm", 10): dict(learning_rate=0.0001, dropout=0.18, batch=34, units1=176, units2=16, epochs=7,
                           filters1=5, kernel1=5, filters2=8, kernel2=5),
}


def spec_for(family, hp, seed=0):
    if family == "lstm":
        return lstm_spec(hp["units1"], hp["units2"], hp["units3"], hp["dropout"], seed=seed)
    if family == "convlstm":
        return convlstm_spec(hp["filters1"], (hp["kernel1"],) * 2, hp["filters2"], (hp["kernel2"],) * 2,
                             hp["units2"], hp["dropout"], seed=seed)
    raise ConfigError(f"unknown family {family!r}")


def train_config_for(hp, seed=0):
    return TrainConfig(learning_rate=hp["learning_rate"], dropout_rate=hp["dropout"], batch_size=hp["batch"],
                       epochs=hp["epochs"], seed=seed)


def fit(family, hp, train_set, seed=0, log=None):
    return train(spec_for(family, hp, seed), train_set, train_config_for(hp, seed), log=log)


def _trial(index, family, hp, train_set, val_set, seed):
    entry = {"index": index, "params": dict(hp)}
    try:
        ck, hist = fit(family, hp, train_set, seed)
        m = evaluate(ck, val_set, timing_samples=0)
    except NumericalFault as exc:
        entry.update(f_measure=float("nan"), FN=None, status=f"diverged: {exc}")
        return entry
    entry.update(f_measure=m.f_measure, accuracy=m.accuracy, recall=m.recall, precision=m.precision,
                 FN=m.FN, FP=m.FP, final_loss=hist[-1], status="ok")
    return entry


def _rank_key(e):
    f = e["f_measure"]
    if not np.isfinite(f):
        return (1, 0.0, 0, e["index"])
    return (0, -f, e["FN"], e["index"])


def rank(entries):
    return sorted(entries, key=_rank_key)


def random_search(space, family, train_set, val_set, n=500, rng=None, seed=0, log=None):
    """Stage 1: n random configurations ranked by validation F-measure.

    Ties go to fewer false negatives, then the earlier sample.  Returns
    (best entry, leaderboard sorted best first).
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = np.random.default_rng(seed) if rng is None else rng
    configs = [space.sample(family, rng) for _ in range(n)]
    board = []
    for i, hp in enumerate(configs):
        board.append(_trial(i, family, hp, train_set, val_set, seed))
        if log:
            log(f"trial {i}: F={board[-1]['f_measure']:.3f} {hp}")
    board = rank(board)
    if not np.isfinite(board[0]["f_measure"]):
        raise SearchFault("every configuration diverged")
    return board[0], board


def perturb(space, family, best, radius, rng):
    hp = {}
    for k in space.keys(family):
        v = best[k]
        lo, hi = space.bounds(k)
        x = rng.uniform(v * (1 - radius), v * (1 + radius)) if radius > 0 else v
        if space.is_int(k):
            x = int(round(x))
        x = min(max(x, lo), hi)
        hp[k] = int(x) if space.is_int(k) else float(x)
    return hp


def refine_search(best, space, family, train_set, val_set, n=100, radius=0.10, rng=None, seed=0, log=None):
    """Stage 2: n configurations within +/- radius (relative) of the incumbent.

    ``best`` is a stage-1 leaderboard entry (or a bare parameter dict, which is
    then evaluated first).  The incumbent competes, so the result is never worse.
    """
    if radius < 0:
        raise ConfigError("radius must be >= 0")
    rng = np.random.default_rng(seed + 1) if rng is None else rng
    if "params" not in best:
        best = _trial(-1, family, best, train_set, val_set, seed)
    incumbent = dict(best, index=-1)
    board = [incumbent]
    for i in range(n):
        hp = perturb(space, family, best["params"], radius, rng)
        board.append(_trial(i, family, hp, train_set, val_set, seed))
        if log:
            log(f"refine {i}: F={board[-1]['f_measure']:.3f} {hp}")
    board = rank(board)
    if not np.isfinite(board[0]["f_measure"]):
        raise SearchFault("every configuration diverged")
    return board[0], board


def validation_split(dataset, fraction=0.2, seed=0):
    from .dataset import split
    tr, val = split(dataset, 1.0 - fraction, np.random.default_rng([seed, 7]))
    return tr, val


def leaderboard_csv(board, path=None):
    keys = []
    for e in board:
        for k in e["params"]:
            if k not in keys:
                keys.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "index", "f_measure", "FN", "FP", "status"] + keys)
    for r, e in enumerate(board, 1):
        w.writerow([r, e["index"], _csv_num(e["f_measure"]), e.get("FN"), e.get("FP"), e.get("status", "ok")]
                   + [e["params"].get(k) for k in keys])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def _csv_num(v):
    return "nan" if v is None or not np.isfinite(v) else f"{v:.6f}"
