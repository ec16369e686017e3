import os

import numpy as np
import pytest

from qat4.data import write_cifar_binary


def direct_conv(x, w, b=None, stride=1, pad=0):
    """Six-loop reference convolution, N x C x H x W input, float64."""
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hout = (h + 2 * pad - kh) // stride + 1
    wout = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, hout, wout))
    for i in range(n):
        for o in range(cout):
            for y in range(hout):
                for xx in range(wout):
                    acc = 0.0
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ci, y * stride + u, xx * stride + v] * w[o, ci, u, v]
                    out[i, o, y, xx] = acc
    if b is not None:
        out += np.asarray(b, dtype=np.float64).reshape(1, -1, 1, 1)
    return out


def central_diff(f, arr, idx, h=1e-6):
    """d f / d arr[idx] by central differences, perturbing ``arr`` in place."""
    old = arr[idx]
    arr[idx] = old + h
    fp = f()
    arr[idx] = old - h
    fm = f()
    arr[idx] = old
    return (fp - fm) / (2 * h)


def numeric_grad(f, arr, h=1e-6):
    g = np.zeros(arr.shape)
    for idx in np.ndindex(arr.shape):
        g[idx] = central_diff(f, arr, idx, h)
    return g


def rel_err(a, b, floor=1e-4):
    """Largest elementwise relative error.

    Entries smaller than ``floor`` times the tensor's largest magnitude are
    compared against that scale instead of their own (finite-difference
    roundoff dominates there).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), max(floor * scale, 1e-12))
    return float(np.max(np.abs(a - b) / denom, initial=0.0))


def make_fake_cifar(root, kind="cifar10", n_train=50_000, n_test=10_000, seed=0):
    """Write canonical-layout binary files filled with random pixels/labels."""
    rng = np.random.default_rng(seed)
    os.makedirs(root, exist_ok=True)
    k = 10 if kind == "cifar10" else 100
    if kind == "cifar10":
        per = n_train // 5
        for i in range(1, 6):
            write_cifar_binary(os.path.join(root, f"data_batch_{i}.bin"),
                               rng.integers(0, 256, (per, 3072)), rng.integers(0, k, per))
        write_cifar_binary(os.path.join(root, "test_batch.bin"),
                           rng.integers(0, 256, (n_test, 3072)), rng.integers(0, k, n_test))
    else:
        for name, n in (("train.bin", n_train), ("test.bin", n_test)):
            write_cifar_binary(os.path.join(root, name), rng.integers(0, 256, (n, 3072)),
                               rng.integers(0, k, n), coarse_labels=rng.integers(0, 20, n))
    return root


@pytest.fixture(scope="session")
def fake_cifar10(tmp_path_factory):
    return make_fake_cifar(str(tmp_path_factory.mktemp("cifar10")), "cifar10")


@pytest.fixture(scope="session")
def fake_cifar100(tmp_path_factory):
    return make_fake_cifar(str(tmp_path_factory.mktemp("cifar100")), "cifar100")


@pytest.fixture(scope="session")
def small_cifar10(tmp_path_factory):
    """Reduced-size files in CIFAR-10 layout for CLI runs (loaded non-strictly)."""
    return make_fake_cifar(str(tmp_path_factory.mktemp("small10")), "cifar10",
                           n_train=320, n_test=100, seed=1)


# -- acceptance report: one line per criterion at the end of the run ---------

_criteria = {}  # n -> {"title": str, "outcomes": {nodeid: outcome}}


def _criterion(item):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return None
    n, title = mark.args
    entry = _criteria.setdefault(n, {"title": title, "outcomes": {}})
    return entry


def pytest_itemcollected(item):
    entry = _criterion(item)
    if entry is not None:
        entry["outcomes"][item.nodeid] = "pending"


def pytest_deselected(items):
    for item in items:
        entry = _criterion(item)
        if entry is not None:
            marks = [m for m in ("desk", "extended") if item.get_closest_marker(m)]
            entry["outcomes"][item.nodeid] = "deselected:" + ",".join(marks)


def pytest_runtest_logreport(report):
    for entry in _criteria.values():
        if report.nodeid not in entry["outcomes"]:
            continue
        if report.failed:
            entry["outcomes"][report.nodeid] = "fail"
        elif report.skipped:
            entry["outcomes"][report.nodeid] = "skip"
        elif report.when == "call" and entry["outcomes"][report.nodeid] == "pending":
            entry["outcomes"][report.nodeid] = "pass"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        entry = _criteria[n]
        states = set(entry["outcomes"].values())
        if "fail" in states:
            verdict = "FAIL"
        elif states == {"pass"}:
            verdict = "PASS"
        elif all(s.startswith("deselected") for s in states):
            marks = sorted({s.split(":")[1] for s in states} - {""})
            verdict = ("NOT RUN (" + ",".join(marks) + " marker deselected)" if marks
                       else "NOT RUN (deselected)")
        elif "pass" in states and states <= {"pass", "pending"} | {s for s in states
                                                                   if s.startswith("deselected")}:
            verdict = "PARTIAL (some parts not run)"
        else:
            verdict = "NOT RUN (" + ",".join(sorted(states)) + ")"
        terminalreporter.write_line(f"criterion {n:2d}  {verdict:<8}  {entry['title']}")
