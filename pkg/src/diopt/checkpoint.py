"""Checkpoint files.

A checkpoint is an uncompressed ``.npz`` archive.  Entry ``__meta__`` holds
UTF-8 JSON (format tag, version, method, config text and hash, network
layout, schedule); every other entry is a named float64 parameter array
such as ``backbone.W0`` or ``net.running_var1``.
"""

import io
import json
import os

import numpy as np

from .baselines import BaselineModel
from .diffusion import NoiseModel, make_schedule
from .errors import ChecksumError, ParseError, UnsupportedVersionError
from .nn import MlpParams, NoiseNet, TimeEmbedding

FORMAT = "diopt-checkpoint"
VERSION = 1


def _mlp_entries(prefix, p):
    out = {}
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        out[f"{prefix}.W{i}"] = w
        out[f"{prefix}.b{i}"] = b
    for name in ("gammas", "betas", "running_mean", "running_var"):
        for i, a in enumerate(getattr(p, name)):
            out[f"{prefix}.{name}{i}"] = a
    return out


def _mlp_meta(p):
    return {"layers": len(p.weights), "activation": p.activation, "dropout": p.dropout,
            "batch_norm": p.batch_norm}


def _mlp_from(prefix, meta, arrs):
    L = meta["layers"]
    get = lambda k: np.array(arrs[f"{prefix}.{k}"], dtype=np.float64)
    nbn = L - 1 if meta["batch_norm"] else 0
    return MlpParams([get(f"W{i}") for i in range(L)], [get(f"b{i}") for i in range(L)],
                     meta["activation"], meta["dropout"],
                     [get(f"gammas{i}") for i in range(nbn)], [get(f"betas{i}") for i in range(nbn)],
                     [get(f"running_mean{i}") for i in range(nbn)],
                     [get(f"running_var{i}") for i in range(nbn)])


def save_checkpoint(path, model, cfg, method, extra=None):
    """Write ``model`` (a NoiseModel or BaselineModel) with the run config."""
    meta = {"format": FORMAT, "version": VERSION, "method": method,
            "config_hash": cfg.hash(), "config": cfg.to_text(), "extra": extra or {}}
    if isinstance(model, NoiseModel):
        net = model.net
        arrays = {**_mlp_entries("backbone", net.backbone), **_mlp_entries("embed", net.embed.head)}
        meta["model"] = {"kind": "noise", "d_y": net.d_y, "d_x": net.d_x, "t_dim": net.embed.dim,
                         "backbone": _mlp_meta(net.backbone), "embed": _mlp_meta(net.embed.head),
                         "schedule": {"T": model.schedule.T, "kind": model.schedule.kind}}
    elif isinstance(model, BaselineModel):
        arrays = _mlp_entries("net", model.params)
        meta["model"] = {"kind": "baseline", "method": model.method, "net": _mlp_meta(model.params),
                         "corr_steps": model.corr_steps, "corr_lr": model.corr_lr}
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.uint8),
             **arrays)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def read_meta(path):
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
    except (OSError, ValueError, KeyError) as exc:
        raise ParseError(f"not a checkpoint: {exc}", 0) from None
    if meta.get("format") != FORMAT:
        raise ParseError("missing checkpoint format tag", 0)
    if meta.get("version") != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {meta.get('version')}")
    return meta


def load_checkpoint(path, expect_hash=None):
    """Return ``(model, meta)``.  ``expect_hash`` must match the stored config hash."""
    meta = read_meta(path)
    if expect_hash is not None and meta["config_hash"] != expect_hash:
        raise ChecksumError(f"checkpoint config hash {meta['config_hash']} != {expect_hash}")
    with np.load(path, allow_pickle=False) as z:
        arrs = {k: z[k] for k in z.files if k != "__meta__"}
    mm = meta["model"]
    if mm["kind"] == "noise":
        net = NoiseNet(_mlp_from("backbone", mm["backbone"], arrs),
                       TimeEmbedding(mm["t_dim"], _mlp_from("embed", mm["embed"], arrs)),
                       mm["d_y"], mm["d_x"])
        sch = mm["schedule"]
        return NoiseModel(net, make_schedule(sch["T"], sch["kind"])), meta
    params = _mlp_from("net", mm["net"], arrs)
    return BaselineModel(mm["method"], params, mm["corr_steps"], mm["corr_lr"]), meta
