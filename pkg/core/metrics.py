"""Evaluation metrics, the autoregressive baseline and report formatting."""
import math

import numpy as np

from .exceptions import ShapeError, SingularSystemError

RMSE = 'rmse'
PCC = 'pcc'
ACC = 'acc'
MAE = 'mae'
METRIC_KINDS = (RMSE, PCC, ACC, MAE)

AR_RIDGE = 1e-8


def pearson(pred, truth):
    """PCC, or None when either side is constant"""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    pred_c = pred - pred.mean()
    truth_c = truth - truth.mean()
    denom = math.sqrt(float((pred_c * pred_c).sum()) * float((truth_c * truth_c).sum()))
    if denom == 0.0:
        return None
    return float(np.clip((pred_c * truth_c).sum() / denom, -1.0, 1.0))


def evaluate_metrics(pred, truth, kinds=(RMSE, PCC)):
    """
    Metrics over the flattened scope the caller selected.

    For ``acc`` pred may be logits (last axis = classes) or class ids.
    Undefined PCC is reported as None.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth)
    results = {}
    for kind in kinds:
        if kind == ACC:
            labels = pred.argmax(axis=-1) if pred.shape != truth.shape else pred
            if labels.shape != truth.shape:
                raise ShapeError(f'acc prediction {pred.shape} does not match truth {truth.shape}')
            results[ACC] = float((labels.astype(np.int64) == truth.astype(np.int64)).mean())
            continue
        p = pred[..., 0] if pred.shape == truth.shape + (1,) else pred
        if p.shape != truth.shape:
            raise ShapeError(f'prediction {pred.shape} does not match truth {truth.shape}')
        diff = p.ravel() - truth.astype(np.float64).ravel()
        if kind == RMSE:
            results[RMSE] = float(math.sqrt((diff * diff).mean()))
        elif kind == MAE:
            results[MAE] = float(np.abs(diff).mean())
        elif kind == PCC:
            results[PCC] = pearson(p, truth)
        else:
            raise ShapeError(f'unknown metric {kind!r}')
    return results


def mean_defined(values):
    """Average skipping undefined entries; None when nothing is defined"""
    defined = [v for v in values if v is not None]
    return sum(defined) / len(defined) if defined else None


class ARBaseline:
    """Per-node AR(p) regressions of x[t+h] on x[t-p+1..t], nothing shared between nodes"""

    def __init__(self, order, horizon=1):
        if order < 1 or horizon < 1:
            raise ShapeError('AR order and horizon must be positive')
        self.order = order
        self.horizon = horizon
        self.coefficients = None

    def fit(self, series):
        series = np.asarray(series, dtype=np.float64)
        if series.ndim == 1:
            series = series[:, None]
        length, nodes = series.shape
        samples = length - self.order - self.horizon + 1
        if length <= self.order or samples < 1:
            raise ShapeError(f'series of length {length} is too short for AR({self.order}) at horizon {self.horizon}')
        self.coefficients = np.zeros((nodes, self.order))
        ridge = AR_RIDGE * np.eye(self.order)
        for node in range(nodes):
            x = series[:, node]
            design = np.stack([x[t - self.order + 1:t + 1] for t in range(self.order - 1, self.order - 1 + samples)])
            target = x[self.order - 1 + self.horizon:self.order - 1 + self.horizon + samples]
            try:
                self.coefficients[node] = np.linalg.solve(design.T @ design + ridge, design.T @ target)
            except np.linalg.LinAlgError as exc:
                raise SingularSystemError(f'AR design for node {node} is singular: {exc}') from exc
        return self

    def predict(self, windows):
        """windows (S, N, T) or (N, T) -> predictions (S, N) or (N,)"""
        if self.coefficients is None:
            raise ShapeError('fit the AR baseline before predicting')
        windows = np.asarray(windows, dtype=np.float64)
        recent = windows[..., -self.order:]
        return (recent * self.coefficients).sum(axis=-1)


def ar_baseline(train_series, order, horizon=1):
    return ARBaseline(order, horizon).fit(train_series)


def format_metric(kind, value):
    """Values as tables print them: large errors rounded to integers, scores to 3 places"""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return 'n/a'
    if kind in (RMSE, MAE):
        return f'{value:.0f}' if abs(value) >= 100 else f'{value:.3f}'
    return f'{value:.3f}'


def better(kind, candidate, reference):
    """True when candidate beats reference for this metric"""
    if candidate is None or reference is None:
        return False
    if kind in (RMSE, MAE):
        return candidate < reference
    return candidate > reference
