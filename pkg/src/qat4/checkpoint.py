"""Binary model files.

Both formats are little-endian and end with a CRC32 of every preceding byte.

NIB4 (INT4 export, inference only)::

    magic "NIB4" | u16 version | str arch | u32 num_classes | str model-config JSON
    u32 n_quant  | n_quant x (str name | u8 ndim | u32 dims.. | f32 c | f32 s
                              | u64 count | ceil(count/2) packed bytes)
    u32 n_fp32   | n_fp32 x array record
    u32 crc32

NIBM (FP32 master, resumable)::

    magic "NIBM" | u16 version | str metadata JSON
    u32 n_arrays | n_arrays x array record
    u32 crc32

``str`` is a u32 byte length followed by UTF-8. An array record is
``str name | u8 dtype (0=f32, 1=f64) | u8 ndim | u32 dims.. | raw data``.

Packed levels store ``level + 7`` (0..14) two per byte, low nibble first;
an odd count is padded with a zero high nibble. Nibble 15 never occurs.
"""

import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .errors import CorruptionError, FormatError
from .model import ARCH_ID, ModelConfig, build_vgg4bit
from .optim import LrSchedule, OptimConfig, QuantAwareAdamW, TrainState
from .quantize import LEVEL_MAX, QuantResult, QuantScale, dequantize

INT4_MAGIC = b"NIB4"
MASTER_MAGIC = b"NIBM"
INT4_VERSION = 1
MASTER_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

MIB = 1024 * 1024


def pack_int4(w_int):
    w = np.asarray(w_int).ravel()
    if w.size and (w.min() < -LEVEL_MAX or w.max() > LEVEL_MAX):
        raise CorruptionError("levels outside [-7, 7] cannot be packed")
    nib = (w.astype(np.int16) + LEVEL_MAX).astype(np.uint8)
    if nib.size % 2:
        nib = np.append(nib, np.uint8(0))
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_int4(data, count):
    buf = np.frombuffer(data, dtype=np.uint8)
    if buf.size != (count + 1) // 2:
        raise CorruptionError(f"{buf.size} bytes cannot hold exactly {count} levels")
    nib = np.empty(buf.size * 2, dtype=np.uint8)
    nib[0::2] = buf & 0x0F
    nib[1::2] = buf >> 4
    if count % 2 and nib[-1] != 0:
        raise CorruptionError("non-zero padding nibble")
    nib = nib[:count]
    if nib.size and nib.max() > 2 * LEVEL_MAX:
        raise CorruptionError("nibble value 15 is not a valid level")
    return nib.astype(np.int8) - np.int8(LEVEL_MAX)


@dataclass
class SizeReport:
    total_params: int
    quantized_params: int
    fp32_equivalent_bytes: int
    int4_theoretical_bytes: float
    actual_file_bytes: int

    @property
    def theoretical_ratio(self):
        return self.fp32_equivalent_bytes / self.int4_theoretical_bytes

    @property
    def actual_ratio(self):
        return self.fp32_equivalent_bytes / self.actual_file_bytes

    def lines(self):
        return [
            f"parameters            {self.total_params:,} ({self.quantized_params:,} quantized)",
            f"fp32 size             {self.fp32_equivalent_bytes:,} B = {self.fp32_equivalent_bytes / MIB:.2f} MiB",
            f"int4 size (4 bits/p)  {self.int4_theoretical_bytes:,.1f} B = {self.int4_theoretical_bytes / MIB:.2f} MiB",
            f"theoretical ratio     {self.theoretical_ratio:.1f}x",
            f"file size             {self.actual_file_bytes:,} B = {self.actual_file_bytes / MIB:.2f} MiB "
            f"({self.actual_ratio:.2f}x)",
        ]


def size_report(net, actual_file_bytes=0):
    total = net.num_parameters()
    return SizeReport(total, sum(p.size for p in net.quantized_params()),
                      4 * total, 4 * total / 8, actual_file_bytes)


# -- low-level encoding ------------------------------------------------------

class _Reader:
    def __init__(self, data, path):
        self.buf = memoryview(data)
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def u8(self):
        return self.unpack("<B")[0]

    def u32(self):
        return self.unpack("<I")[0]

    def string(self):
        try:
            return bytes(self.take(self.u32())).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{self.path}: invalid string field") from None

    def array(self):
        name = self.string()
        code, ndim = self.unpack("<BB")
        if code not in _DTYPES:
            raise FormatError(f"{self.path}: unknown dtype code {code} for {name}")
        shape = self.unpack(f"<{ndim}I")
        dtype = _DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(self.take(count * dtype.itemsize), dtype=dtype)
        return name, data.reshape(shape).astype(dtype.newbyteorder("="))


def _string(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _array(name, a):
    a = np.asarray(a)
    code = _DTYPE_CODES[np.dtype(a.dtype.newbyteorder("="))]
    return (_string(name) + struct.pack("<BB", code, a.ndim)
            + struct.pack(f"<{a.ndim}I", *a.shape)
            + np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes())


def _finish(out):
    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def _open_checked(path, magic):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 10 or data[:4] != magic:
        other = MASTER_MAGIC if magic == INT4_MAGIC else INT4_MAGIC
        hint = f" (this is a {other.decode()} file)" if data[:4] == other else ""
        raise FormatError(f"{path}: bad magic, expected {magic.decode()}{hint}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError(f"{path}: checksum mismatch")
    r = _Reader(body, path)
    r.take(4)
    return r


def _fp32_sidecar(net):
    arrays = {p.name: p.value for p in net.params() if not p.quantized}
    arrays.update(net.buffers())
    return arrays


def _check_arch(path, arch, num_classes, expected_classes):
    if arch != ARCH_ID:
        raise FormatError(f"{path}: architecture {arch!r}, expected {ARCH_ID!r}")
    if expected_classes is not None and num_classes != expected_classes:
        raise FormatError(
            f"{path}: checkpoint has {num_classes} classes, dataset has {expected_classes}")


def _assign(path, net, name, value):
    targets = {p.name: p.value for p in net.params()}
    targets.update(net.buffers())
    if name not in targets:
        raise FormatError(f"{path}: unexpected tensor {name}")
    dst = targets[name]
    if dst.shape != value.shape:
        raise FormatError(f"{path}: {name} has shape {value.shape}, expected {dst.shape}")
    dst[...] = value


# -- INT4 export -------------------------------------------------------------

def export_int4(net, path):
    """Freeze levels and scales from the current masters and write a NIB4 file."""
    out = io.BytesIO()
    out.write(INT4_MAGIC + struct.pack("<H", INT4_VERSION))
    out.write(_string(ARCH_ID) + struct.pack("<I", net.config.num_classes))
    out.write(_string(json.dumps(asdict(net.config), sort_keys=True)))
    qparams = net.quantized_params()
    out.write(struct.pack("<I", len(qparams)))
    for p in qparams:
        q = p.last_quant if p.frozen and p.last_quant is not None else p.quantize()
        w_int = q.w_int
        out.write(_string(p.name) + struct.pack("<B", w_int.ndim)
                  + struct.pack(f"<{w_int.ndim}I", *w_int.shape)
                  + struct.pack("<ff", q.scale.c, q.scale.s)
                  + struct.pack("<Q", w_int.size) + pack_int4(w_int))
    sidecar = _fp32_sidecar(net)
    out.write(struct.pack("<I", len(sidecar)))
    for name, a in sidecar.items():
        out.write(_array(name, a))
    data = _finish(out)
    with open(path, "wb") as fh:
        fh.write(data)
    return size_report(net, len(data))


def load_int4(path, expected_classes=None):
    """Rebuild an inference-only network whose weights are ``levels * s``."""
    r = _open_checked(path, INT4_MAGIC)
    (version,) = r.unpack("<H")
    if version != INT4_VERSION:
        raise FormatError(f"{path}: unsupported NIB4 version {version}")
    arch = r.string()
    num_classes = r.u32()
    _check_arch(path, arch, num_classes, expected_classes)
    try:
        cfg = ModelConfig(**json.loads(r.string()))
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad model config ({exc})") from None
    net = build_vgg4bit(cfg, seed=0)
    qparams = {p.name: p for p in net.quantized_params()}
    n_quant = r.u32()
    if n_quant != len(qparams):
        raise FormatError(f"{path}: {n_quant} quantized layers, expected {len(qparams)}")
    for _ in range(n_quant):
        name = r.string()
        shape = r.unpack(f"<{r.u8()}I")
        c, s = r.unpack("<ff")
        (count,) = r.unpack("<Q")
        p = qparams.get(name)
        if p is None or p.value.shape != tuple(shape) or count != p.value.size:
            raise FormatError(f"{path}: layer {name} shape {shape} does not match {ARCH_ID}")
        scale = QuantScale.from_bound(c)
        if c > 0 and np.float32(scale.s) != np.float32(s):
            raise CorruptionError(f"{path}: layer {name} step {s} inconsistent with bound {c}")
        w_int = unpack_int4(bytes(r.take((count + 1) // 2)), count).reshape(shape)
        w_q = dequantize(w_int, scale, p.value.dtype)
        p.value[...] = w_q
        p.freeze(QuantResult(w_q, w_int, scale))
    for _ in range(r.u32()):
        name, a = r.array()
        _assign(path, net, name, a)
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: trailing bytes")
    net.inference_only = True
    return net


# -- FP32 master checkpoint --------------------------------------------------

def save_master(path, state):
    net, opt = state.net, state.optimizer
    meta = {
        "arch": ARCH_ID,
        "num_classes": net.config.num_classes,
        "model": asdict(net.config),
        "optim": asdict(opt.config),
        "schedule": asdict(state.schedule),
        "seed": state.seed,
        "net_seed": net.seed,
        "epoch": state.epoch,
        "step_in_epoch": state.step_in_epoch,
        "global_step": state.global_step,
        "steps_per_epoch": state.steps_per_epoch,
        "best_acc": state.best_acc,
        "adam_t": opt.state.t,
        "dtype": np.dtype(net.dtype).name,
    }
    arrays = [(f"param/{p.name}", p.value) for p in net.params()]
    arrays += [(f"buffer/{k}", v) for k, v in net.buffers().items()]
    arrays += [(f"m/{k}", v) for k, v in opt.state.m.items()]
    arrays += [(f"v/{k}", v) for k, v in opt.state.v.items()]
    out = io.BytesIO()
    out.write(MASTER_MAGIC + struct.pack("<H", MASTER_VERSION))
    out.write(_string(json.dumps(meta, sort_keys=True)))
    out.write(struct.pack("<I", len(arrays)))
    for name, a in arrays:
        out.write(_array(name, a))
    with open(path, "wb") as fh:
        fh.write(_finish(out))


def load_master(path, expected_classes=None):
    """Restore a TrainState (network, optimizer moments, schedule clock)."""
    r = _open_checked(path, MASTER_MAGIC)
    (version,) = r.unpack("<H")
    if version != MASTER_VERSION:
        raise FormatError(f"{path}: unsupported NIBM version {version}")
    try:
        meta = json.loads(r.string())
        _check_arch(path, meta["arch"], meta["num_classes"], expected_classes)
        cfg = ModelConfig(**meta["model"])
        net = build_vgg4bit(cfg, seed=meta["net_seed"], dtype=np.dtype(meta["dtype"]))
        opt = QuantAwareAdamW(net.params(), OptimConfig(**meta["optim"]))
        schedule = LrSchedule(**meta["schedule"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: bad metadata ({exc})") from None
    opt.state.t = meta["adam_t"]
    targets = {f"param/{p.name}": p.value for p in net.params()}
    targets.update({f"buffer/{k}": v for k, v in net.buffers().items()})
    targets.update({f"m/{k}": v for k, v in opt.state.m.items()})
    targets.update({f"v/{k}": v for k, v in opt.state.v.items()})
    seen = set()
    for _ in range(r.u32()):
        name, a = r.array()
        if name not in targets or targets[name].shape != a.shape:
            raise FormatError(f"{path}: unexpected tensor {name} {a.shape}")
        targets[name][...] = a
        seen.add(name)
    if seen != set(targets):
        raise FormatError(f"{path}: missing tensors {sorted(set(targets) - seen)[:3]}")
    return TrainState(net, opt, schedule, seed=meta["seed"], epoch=meta["epoch"],
                      step_in_epoch=meta["step_in_epoch"], global_step=meta["global_step"],
                      steps_per_epoch=meta["steps_per_epoch"], best_acc=meta["best_acc"])


def read_kind(path):
    """Return "int4" or "master" from a file's magic bytes."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == INT4_MAGIC:
        return "int4"
    if magic == MASTER_MAGIC:
        return "master"
    raise FormatError(f"{path}: not a qat4 checkpoint")
