"""Model JSON persistence, CSV report writers and the run manifest."""

from __future__ import annotations

import csv
import json
import platform
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__, nn

MODEL_FORMAT_VERSION = 1

SHARPNESS_COLUMNS = ("sample_id", "loss", "confidence", "kappa_spectral", "kappa_frobenius", "layer", "trace_estimate")
TRAJECTORY_COLUMNS = (
    "sample_id",
    "iteration",
    "loss",
    "predicted_class",
    "confidence",
    "kappa_spectral",
    "kappa_frobenius",
    "l2_dist_from_clean",
)
CERTIFICATE_COLUMNS = ("sample_id", "kappa_frobenius", "L", "r", "epsilon", "delta_cert", "cubic_residual")
HISTOGRAM_COLUMNS = ("bin_left", "bin_right", "count")
BASIN_COLUMNS = ("sample_id", "kappa_at_clean", "take_off", "basin_width")
SWEEP_COLUMNS = (
    "scale",
    "clean_accuracy",
    "robust_accuracy",
    "mean_kappa_spectral",
    "mean_kappa_frobenius",
    "transfer_rate",
    "mean_loss_increase",
)
DETECTOR_COLUMNS = ("fold", "threshold", "direction", "train_accuracy", "test_accuracy")
COLLAPSE_COLUMNS = ("alpha", "mean_kappa_spectral", "mean_kappa_frobenius", "mean_trace_logit", "mean_confidence", "envelope_violations")
HESSIAN_CHECK_COLUMNS = ("check", "instances", "max_rel_error", "tolerance", "passed")
DATA_COLUMNS_LABEL = "label"
TRAIN_COLUMNS = ("epoch", "loss")


class ModelFormatError(ValueError):
    """Base class for model file problems."""


class MalformedModelError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    def __init__(self, found, expected: int = MODEL_FORMAT_VERSION):
        super().__init__(f"model format version {found!r}, expected {expected}")
        self.found = found


class DimensionError(ModelFormatError):
    def __init__(self, message: str, layer: int):
        super().__init__(f"layer {layer}: {message}")
        self.layer = layer


def model_to_dict(net: nn.MlpNetwork) -> dict:
    return {
        "version": MODEL_FORMAT_VERSION,
        "n_classes": net.n_classes,
        "layers": [
            {
                "in_dim": layer.in_dim,
                "out_dim": layer.out_dim,
                "activation": layer.activation,
                "weight": layer.weight.ravel().tolist(),
                "bias": None if layer.bias is None else layer.bias.tolist(),
            }
            for layer in net.layers
        ],
    }


def model_from_dict(doc) -> nn.MlpNetwork:
    if not isinstance(doc, dict) or "version" not in doc:
        raise MalformedModelError("model document must be an object with a version")
    if doc["version"] != MODEL_FORMAT_VERSION:
        raise VersionMismatchError(doc["version"])
    specs = doc.get("layers")
    if not isinstance(specs, list) or not specs:
        raise MalformedModelError("model document needs a nonempty layer list")
    layers = []
    prev_out = None
    for i, spec in enumerate(specs):
        try:
            n_in, n_out = int(spec["in_dim"]), int(spec["out_dim"])
            flat = np.asarray(spec["weight"], dtype=np.float64)
            act = spec["activation"]
            bias = spec.get("bias")
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedModelError(f"layer {i}: {exc}") from exc
        if n_in < 1 or n_out < 1 or flat.ndim != 1 or flat.size != n_in * n_out:
            raise DimensionError(f"weight has {flat.size} entries, expected {n_out} x {n_in}", i)
        if prev_out is not None and n_in != prev_out:
            raise DimensionError(f"input dim {n_in} does not match previous output dim {prev_out}", i)
        if bias is not None:
            bias = np.asarray(bias, dtype=np.float64)
            if bias.shape != (n_out,):
                raise DimensionError(f"bias has shape {bias.shape}, expected ({n_out},)", i)
        if act not in (nn.RELU, nn.IDENTITY):
            raise MalformedModelError(f"layer {i}: unknown activation {act!r}")
        layers.append(nn.Layer(flat.reshape(n_out, n_in), bias, act))
        prev_out = n_out
    if doc.get("n_classes", prev_out) != prev_out:
        raise DimensionError(f"class count {doc.get('n_classes')} does not match output dim {prev_out}", len(specs) - 1)
    try:
        return nn.MlpNetwork(layers)
    except ValueError as exc:
        raise MalformedModelError(str(exc)) from exc


def save_model(net: nn.MlpNetwork, path) -> None:
    # json writes floats with repr, the shortest string that round-trips.
    Path(path).write_text(json.dumps(model_to_dict(net), indent=1) + "\n")


def load_model(path) -> nn.MlpNetwork:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MalformedModelError(f"{path}: {exc}") from exc
    return model_from_dict(doc)


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            if len(row) != len(columns):
                raise ValueError(f"row has {len(row)} cells, schema has {len(columns)}")
            w.writerow([_cell(v) for v in row])
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def trajectory_rows(trajectories):
    for t in trajectories:
        dist = t.l2_distance()
        for it in range(t.iterates.shape[0]):
            yield (
                t.sample_id,
                it,
                t.loss[it],
                t.predicted[it],
                t.confidence[it],
                t.kappa_spectral[it],
                t.kappa_frobenius[it],
                dist[it],
            )


def certificate_rows(certs):
    for c in certs:
        if c.refused:
            yield (c.sample_id, c.kappa_frobenius, c.L, c.r, c.epsilon, "refused:" + c.refused, "")
        else:
            yield (c.sample_id, c.kappa_frobenius, c.L, c.r, c.epsilon, c.delta_cert, c.cubic_residual)


def write_manifest(path, command: str, config_text: str, seeds: dict) -> Path:
    lines = [
        f"command: {command}",
        f"curvlab: {__version__}",
        f"numpy: {np.__version__}",
        f"python: {platform.python_version()}",
    ]
    lines += [f"seed.{k}: {v}" for k, v in sorted(seeds.items())]
    lines += ["", "[config]", config_text.rstrip(), ""]
    path = Path(path)
    path.write_text("\n".join(lines))
    return path
