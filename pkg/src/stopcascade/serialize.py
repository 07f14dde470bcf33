"""Checkpoint and artifact serialization.

Checkpoints are a small binary container: magic, a JSON header describing
layer shapes and the cost schedule, then raw little-endian float64 blobs.
Round-trips are bit-exact and the bytes are a pure function of the content
(no timestamps), so identical runs write identical files. CSV artifacts
carry their schema version in a leading comment line.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path

import numpy as np

from .cascade import Cascade, EvalReport
from .errors import DataFormatError
from .nn import DenseLayer, FeedForwardNet

MAGIC = b"SCCKPT1\n"
FORMAT_VERSION = 1


def _net_header(net):
    return [
        {"in": l.in_dim, "out": l.out_dim, "activation": l.activation}
        for l in net.layers
    ]


def _net_blobs(net):
    blobs = []
    for l in net.layers:
        blobs.append(np.ascontiguousarray(l.weights))
        blobs.append(np.ascontiguousarray(l.bias))
    return blobs


def _write_container(path, header, blobs):
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("ascii")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob.astype("<f8", copy=False).tobytes())


def _read_container(path):
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise DataFormatError(f"{path}: not a checkpoint (bad magic at byte 0)")
        (header_len,) = struct.unpack("<Q", f.read(8))
        try:
            header = json.loads(f.read(header_len).decode("ascii"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"{path}: corrupt header: {exc}")
        if header.get("format") != FORMAT_VERSION:
            raise DataFormatError(
                f"{path}: unsupported format version {header.get('format')}")
        payload = f.read()
    return header, payload


def _nets_from_header(header_nets, payload, offset=0):
    nets = []
    for net_desc in header_nets:
        layers = []
        for ld in net_desc["layers"]:
            n_w = ld["in"] * ld["out"]
            w = np.frombuffer(payload, dtype="<f8", count=n_w, offset=offset)
            offset += n_w * 8
            b = np.frombuffer(payload, dtype="<f8", count=ld["out"], offset=offset)
            offset += ld["out"] * 8
            layers.append(DenseLayer(w.reshape(ld["in"], ld["out"]).copy(),
                                     b.copy(), ld["activation"]))
        nets.append(FeedForwardNet(layers))
    return nets, offset


def save_net(path, net):
    header = {
        "format": FORMAT_VERSION,
        "kind": "net",
        "nets": [{"role": "net", "layers": _net_header(net)}],
    }
    _write_container(path, header, _net_blobs(net))


def load_net(path):
    header, payload = _read_container(path)
    if header.get("kind") != "net":
        raise DataFormatError(f"{path}: expected a single-network checkpoint")
    nets, offset = _nets_from_header(header["nets"], payload)
    if offset != len(payload):
        raise DataFormatError(f"{path}: {len(payload) - offset} trailing bytes")
    return nets[0]


def save_cascade(path, cascade, config_digest=""):
    header = {
        "format": FORMAT_VERSION,
        "kind": "cascade",
        "num_classes": cascade.num_classes,
        "cost_basis": str(cascade.cost_basis),
        "raw_stage_costs": [float(c) for c in cascade.raw_stage_costs],
        "config_digest": config_digest,
        "nets": (
            [{"role": "classifier", "layers": _net_header(n)} for n in cascade.classifiers]
            + [{"role": "policy", "layers": _net_header(n)} for n in cascade.policies]
        ),
    }
    blobs = []
    for net in cascade.all_nets():
        blobs.extend(_net_blobs(net))
    _write_container(path, header, blobs)


def load_cascade(path):
    header, payload = _read_container(path)
    if header.get("kind") != "cascade":
        raise DataFormatError(f"{path}: expected a cascade checkpoint")
    nets, offset = _nets_from_header(header["nets"], payload)
    if offset != len(payload):
        raise DataFormatError(f"{path}: {len(payload) - offset} trailing bytes")
    roles = [d["role"] for d in header["nets"]]
    classifiers = [n for n, r in zip(nets, roles) if r == "classifier"]
    policies = [n for n, r in zip(nets, roles) if r == "policy"]
    return Cascade(classifiers, policies, header["raw_stage_costs"],
                   header["cost_basis"])


def _fmt_cell(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_csv(path, schema, columns, rows):
    """CSV with a '# schema=' version comment; floats via repr (lossless)."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        f.write(f"# schema={schema}\n")
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt_cell(row[c]) if isinstance(row, dict)
                             else _fmt_cell(row[i])
                             for i, c in enumerate(columns)])
    return path


def read_csv(path):
    """Read back a schema-tagged CSV into (schema, list of dict rows)."""
    with open(path, newline="") as f:
        first = f.readline().strip()
        if not first.startswith("# schema="):
            raise DataFormatError(f"{path}: missing schema comment line")
        schema = first[len("# schema="):]
        reader = csv.DictReader(f)
        rows = list(reader)
    return schema, rows


def write_train_metrics(path, metrics, depth):
    columns = ["epoch", "mean_reward", "accuracy", "amortized_flops"]
    columns += [f"stop_histogram_{k + 1}" for k in range(depth)]
    columns += ["baseline_value"]
    return write_csv(path, "stopcascade.train_metrics.v1", columns, metrics)


def write_pretrain_metrics(path, logs):
    rows = [row for per_clf in logs for row in per_clf]
    return write_csv(path, "stopcascade.pretrain_metrics.v1",
                     ["classifier", "epoch", "loss", "accuracy"], rows)


def report_to_dict(report):
    matrix = [[None if math.isnan(v) else v for v in row]
              for row in report.accuracy_matrix.tolist()]
    out = {
        "schema": "stopcascade.eval_report.v1",
        "accuracy": report.accuracy,
        "amortized_flops": report.amortized_flops,
        "mean_reward": report.mean_reward,
        "n_samples": report.n_samples,
        "assignment_histogram": report.assignment_histogram.tolist(),
        "assignment_counts": report.assignment_counts.tolist(),
        "accuracy_matrix": matrix,
    }
    if report.tier_stop_fractions is not None:
        out["tier_stop_fractions"] = {
            str(t): v.tolist() for t, v in sorted(report.tier_stop_fractions.items())
        }
    return out


def report_from_dict(d):
    matrix = np.array([[np.nan if v is None else v for v in row]
                       for row in d["accuracy_matrix"]])
    tiers = None
    if "tier_stop_fractions" in d:
        tiers = {int(t): np.asarray(v) for t, v in d["tier_stop_fractions"].items()}
    return EvalReport(
        accuracy=d["accuracy"],
        amortized_flops=d["amortized_flops"],
        assignment_histogram=np.asarray(d["assignment_histogram"]),
        accuracy_matrix=matrix,
        assignment_counts=np.asarray(d["assignment_counts"], dtype=np.int64),
        n_samples=d["n_samples"],
        mean_reward=d["mean_reward"],
        tier_stop_fractions=tiers,
    )


def write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")
    return Path(path)


def load_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON: {exc}")


def write_eval_report(out_dir, report, basename="report"):
    """Emit report.json plus the two CSV views (scalars, long-form matrix)."""
    out_dir = Path(out_dir)
    written = []
    written.append(write_json(out_dir / f"{basename}.json", report_to_dict(report)))
    depth = len(report.assignment_histogram)
    rows = [
        ("accuracy", report.accuracy),
        ("amortized_flops", report.amortized_flops),
        ("mean_reward", report.mean_reward),
        ("n_samples", report.n_samples),
    ]
    rows += [(f"stop_histogram_{k + 1}", report.assignment_histogram[k])
             for k in range(depth)]
    written.append(write_csv(out_dir / f"{basename}.csv",
                             "stopcascade.eval_report_csv.v1",
                             ["metric", "value"], rows))
    matrix_rows = []
    for i in range(depth):
        for j in range(depth):
            v = report.accuracy_matrix[i, j]
            matrix_rows.append((i + 1, j + 1,
                                "" if math.isnan(v) else repr(float(v)),
                                int(report.assignment_counts[j])))
    written.append(write_csv(out_dir / f"{basename}_accuracy_matrix.csv",
                             "stopcascade.accuracy_matrix.v1",
                             ["k_i", "k_j", "accuracy", "count"], matrix_rows))
    return written


def write_manifest(out_dir, config_digest, seed, mode, artifacts):
    """Run manifest listing every emitted file (paths relative to out_dir)."""
    out_dir = Path(out_dir)
    entries = sorted(str(Path(a).relative_to(out_dir)) for a in artifacts)
    payload = {
        "schema": "stopcascade.manifest.v1",
        "config_digest": config_digest,
        "seed": seed,
        "mode": mode,
        "artifacts": entries,
    }
    return write_json(out_dir / "manifest.json", payload)
