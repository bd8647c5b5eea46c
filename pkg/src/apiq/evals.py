"""Diagnostics: perplexity, activation-error depth profiles, weight-error
reports, and tensor histograms. Reports serialize to TSV (UTF-8, tab
separated, newline terminated, header row first)."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .autodiff import log_softmax_nll
from .errors import InputError, ShapeError
from .model import Capture, Linear, TinyTransformer


def perplexity(model: TinyTransformer, tokens: np.ndarray, chunk_len: int,
               batch_chunks: int = 64) -> float:
    """exp of the mean token-level cross-entropy over non-overlapping
    chunks of `chunk_len` tokens; the trailing partial chunk is dropped."""
    tokens = np.asarray(tokens).reshape(-1)
    n_chunks = len(tokens) // chunk_len
    if n_chunks < 1:
        raise InputError(
            f"corpus has {len(tokens)} tokens, shorter than one chunk ({chunk_len})")
    chunks = tokens[: n_chunks * chunk_len].reshape(n_chunks, chunk_len)
    total = 0.0
    count = 0
    for lo in range(0, n_chunks, batch_chunks):
        batch = chunks[lo: lo + batch_chunks]
        logits = model.forward(batch).value.astype(np.float64)
        flat = logits[:, :-1, :].reshape(-1, logits.shape[-1])
        tgt = batch[:, 1:].reshape(-1)
        total += float(log_softmax_nll(flat, tgt).sum())
        count += tgt.size
    return float(np.exp(total / count))


@dataclass
class ErrorRecord:
    layer: str
    block: int
    value: float


@dataclass
class ErrorReport:
    kind: str
    records: list[ErrorRecord]

    def by_layer(self) -> dict[str, float]:
        return {r.layer: r.value for r in self.records}


def _block_index(layer_name: str) -> int:
    return int(layer_name.split(".")[1])


def _check_same_structure(a: TinyTransformer, b: TinyTransformer) -> None:
    if a.config != b.config:
        raise ShapeError("models differ structurally")


def activation_error_profile(full_model: TinyTransformer,
                             quant_model: TinyTransformer,
                             tokens: np.ndarray) -> ErrorReport:
    """Per-layer Frobenius norm of the output difference divided by the
    token count, with each path propagated end to end (so errors from
    shallower layers accumulate into deeper entries)."""
    _check_same_structure(full_model, quant_model)
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    n_tokens = tokens.shape[0] * tokens.shape[1]

    cap_f, cap_q = Capture(), Capture()
    full_model.forward(tokens, capture=cap_f)
    quant_model.forward(tokens, capture=cap_q)
    records = []
    for tap_f, tap_q in zip(cap_f.layers, cap_q.layers):
        diff = tap_f.y.astype(np.float64) - tap_q.y.astype(np.float64)
        value = float(np.sqrt((diff * diff).sum())) / n_tokens
        records.append(ErrorRecord(layer=tap_f.name,
                                   block=_block_index(tap_f.name), value=value))
    return ErrorReport(kind="activation-per-token", records=records)


def weight_error_report(full_model: TinyTransformer,
                        quant_model: TinyTransformer) -> ErrorReport:
    """Per-layer || W - (Q + A B^T) ||_F."""
    _check_same_structure(full_model, quant_model)
    records = []
    for lay_f, lay_q in zip(full_model.iter_layers(), quant_model.iter_layers()):
        diff = lay_f.effective_weight().astype(np.float64) \
            - lay_q.effective_weight().astype(np.float64)
        records.append(ErrorRecord(layer=lay_f.name,
                                   block=_block_index(lay_f.name),
                                   value=float(np.sqrt((diff * diff).sum()))))
    return ErrorReport(kind="weight-frobenius", records=records)


def relative_weight_error_report(full_model: TinyTransformer,
                                 baseline_model: TinyTransformer,
                                 method_model: TinyTransformer) -> ErrorReport:
    """Per-layer e = ||dW_baseline||_F - ||dW_method||_F; positive means
    the method reduced the weight error relative to the baseline."""
    base = weight_error_report(full_model, baseline_model).by_layer()
    meth = weight_error_report(full_model, method_model).by_layer()
    records = [ErrorRecord(layer=name, block=_block_index(name),
                           value=base[name] - meth[name]) for name in base]
    return ErrorReport(kind="relative-weight", records=records)


def histogram_export(layer: Linear, bins: int,
                     reference_weight: np.ndarray | None = None
                     ) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """(bin centers, counts) per tensor of the layer: the full-precision
    weight when available, the dequantized codes Q, the adapter product
    A B^T and the factors A and B. Bin ranges span each tensor's min..max
    and counts always sum to the element count."""
    if bins < 2:
        raise ValueError("need at least 2 bins")
    tensors: dict[str, np.ndarray] = {}
    w = layer.weight if layer.weight is not None else reference_weight
    if w is not None:
        tensors["W"] = w
    if layer.qstate is not None:
        tensors["Q"] = layer.qstate.dequantized()
    if layer.lora is not None and layer.lora.rank > 0:
        tensors["ABt"] = layer.lora.delta()
        tensors["A"] = layer.lora.a
        tensors["B"] = layer.lora.b
    out = {}
    for name, t in tensors.items():
        flat = np.asarray(t, dtype=np.float64).reshape(-1)
        lo, hi = float(flat.min()), float(flat.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        counts, edges = np.histogram(flat, bins=bins, range=(lo, hi))
        centers = (edges[:-1] + edges[1:]) / 2.0
        out[name] = (centers, counts)
    return out


# ---------------------------------------------------------------------------
# TSV serialization
# ---------------------------------------------------------------------------

def format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_tsv(stream, header: list[str], rows, config_line: str | None = None) -> None:
    if config_line is not None:
        stream.write(f"config\t{config_line}\n")
    stream.write("\t".join(header) + "\n")
    for row in rows:
        stream.write("\t".join(format_value(v) for v in row) + "\n")


def report_rows(report: ErrorReport):
    return [(r.layer, r.block, r.value) for r in report.records]


def report_to_tsv(report: ErrorReport, config_line: str | None = None) -> str:
    buf = io.StringIO()
    write_tsv(buf, ["layer", "block", report.kind], report_rows(report), config_line)
    return buf.getvalue()


def histograms_to_tsv(hists: dict[str, tuple[np.ndarray, np.ndarray]],
                      config_line: str | None = None) -> str:
    buf = io.StringIO()
    rows = []
    for name, (centers, counts) in hists.items():
        for c, n in zip(centers, counts):
            rows.append((name, float(c), int(n)))
    write_tsv(buf, ["tensor", "bin_center", "count"], rows, config_line)
    return buf.getvalue()
