"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"STRL1"
    u32 version, u32 n_blocks
    n_blocks x block:
        u32 name_len, name (utf-8)
        u8  dtype code (0 f32, 1 f64, 2 raw bytes, 3 i64)
        u32 ndim, ndim x u32 shape
        payload, row-major little-endian

Float tensors are stored as f32 unless the run uses f64 precision, in which
case they are stored as f64 so a resumed run continues bit-for-bit.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .autodiff import AdamState, Tensor
from .bigraph import BipartiteGraph
from .config import from_dict
from .networks import ModelState

MAGIC = b"STRL1"
VERSION = 1
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


def _block(name: str, arr: np.ndarray, code: int) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=_CODES[code])
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<BI", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def _bytes_block(name: str, payload: bytes) -> bytes:
    return _block(name, np.frombuffer(payload, dtype=np.uint8), 2)


def write_blocks(path, blocks: list[bytes]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blocks)))
        for b in blocks:
            fh.write(b)
    os.replace(tmp, path)


def read_blocks(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    version, n = struct.unpack_from("<II", buf, pos)
    pos += 8
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + ln].decode("utf-8")
        pos += ln
        code, ndim = struct.unpack_from("<BI", buf, pos)
        pos += 5
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        dt = _CODES.get(code)
        if dt is None:
            raise CheckpointError(f"{path}: unknown dtype code {code} in block {name!r}")
        count = int(np.prod(shape)) if ndim else 1
        nbytes = count * dt.itemsize
        if pos + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated block {name!r}")
        out[name] = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(shape).copy()
        pos += nbytes
    return out


def save_checkpoint(path, run) -> None:
    code = 1 if run.config.precision == "f64" else 0
    blocks = [_bytes_block("meta.config", json.dumps(run.config.to_dict()).encode())]
    blocks.append(_block("meta.epoch", np.array([run.epoch, run.seed]), 3))
    blocks.append(_block("meta.ema_tau", np.array([run.model.ema_tau]), 1))
    blocks.append(_bytes_block("meta.id_map", run.id_map.encode()))
    blocks.append(_bytes_block("meta.history", json.dumps(run.history).encode()))
    blocks.append(_bytes_block("meta.epoch_log", json.dumps(run.epoch_log).encode()))
    for name, t in run.model.theta.items():
        blocks.append(_block("theta." + name, t.data, code))
    for name, t in run.model.phi.items():
        blocks.append(_block("phi." + name, t.data, code))
    opt = run.optimizer
    blocks.append(_block("adam.step", np.array([opt.step]), 3))
    blocks.append(_block("adam.hparams", np.array([opt.lr, opt.beta1, opt.beta2, opt.eps]), 1))
    for name, m, v in zip(run.model.theta, opt.m, opt.v):
        blocks.append(_block("adam.m." + name, m, code))
        blocks.append(_block("adam.v." + name, v, code))
    write_blocks(path, blocks)


def load_checkpoint(path, graph: BipartiteGraph):
    """Rebuild a TrainRun from ``path`` for the given training graph."""
    from .trainer import TrainRun, dtype_for

    b = read_blocks(path)
    cfg = from_dict(json.loads(b["meta.config"].tobytes()))
    dtype = dtype_for(cfg.precision)

    def tensors(prefix, grad):
        return {k[len(prefix):]: Tensor(v.astype(dtype), requires_grad=grad, name=k[len(prefix):])
                for k, v in b.items() if k.startswith(prefix)}

    theta = tensors("theta.", True)
    phi = tensors("phi.", False)
    if theta["enc.u.emb0"].shape[0] != graph.n_u or theta["enc.v.emb0"].shape[0] != graph.n_v:
        raise CheckpointError(f"{path}: node counts do not match the supplied graph")
    model = ModelState(cfg.model, theta, phi, float(b["meta.ema_tau"][0]))
    lr, b1, b2, eps = b["adam.hparams"].tolist()
    opt = AdamState(
        m=[b["adam.m." + k].astype(dtype) for k in theta],
        v=[b["adam.v." + k].astype(dtype) for k in theta],
        lr=lr, beta1=b1, beta2=b2, eps=eps, step=int(b["adam.step"][0]),
    )
    epoch, seed = (int(x) for x in b["meta.epoch"])
    return TrainRun(cfg, graph, model, opt, epoch=epoch, seed=seed,
                    history=json.loads(b["meta.history"].tobytes()),
                    epoch_log=json.loads(b["meta.epoch_log"].tobytes()),
                    id_map=b["meta.id_map"].tobytes().decode())
