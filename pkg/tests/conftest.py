import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def fd_relative_error(fn, inputs, eps=1e-5, max_coords=None, seed=0):
    """Compare autograd gradients of scalar ``fn(*inputs)`` with central differences.

    Inputs are float64 leaf tensors.  Returns ``||g_auto - g_fd|| / max(||g_auto||, ||g_fd||)``
    over the checked coordinates (all, or ``max_coords`` sampled per input).
    """
    inputs = [t.detach().clone().requires_grad_(True) for t in inputs]
    out = fn(*inputs)
    grads = torch.autograd.grad(out, inputs)
    rng = np.random.default_rng(seed)
    auto, numeric = [], []
    for t, g in zip(inputs, grads):
        flat = t.detach().view(-1)
        coords = np.arange(flat.numel())
        if max_coords is not None and flat.numel() > max_coords:
            coords = rng.choice(flat.numel(), max_coords, replace=False)
        for i in coords:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                hi = fn(*inputs).item()
                flat[i] = orig - eps
                lo = fn(*inputs).item()
                flat[i] = orig
            numeric.append((hi - lo) / (2 * eps))
            auto.append(g.view(-1)[i].item())
    auto, numeric = np.array(auto), np.array(numeric)
    scale = max(np.linalg.norm(auto), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(auto - numeric) / scale)


def brute_force_even_odd(vertices, width, height):
    """Per-pixel-centre crossing-number test, written independently of the library."""
    v = np.asarray(vertices, dtype=np.float64)
    mask = np.zeros((height, width), dtype=bool)
    n = len(v)
    for r in range(height):
        y = r + 0.5
        for c in range(width):
            x = c + 0.5
            inside = False
            j = n - 1
            for i in range(n):
                xi, yi = v[i]
                xj, yj = v[j]
                if (yi > y) != (yj > y):
                    if x < (xj - xi) * (y - yi) / (yj - yi) + xi:
                        inside = not inside
                j = i
            mask[r, c] = inside
    return mask


def greedy_nms_oracle(boxes, scores, thr):
    """O(n^2) greedy suppression on plain Python floats."""
    boxes = [list(map(float, b)) for b in boxes]
    scores = list(map(float, scores))

    def iou(a, b):
        ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
        iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
        inter = ix * iy
        union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
        return inter / union if union > 0 else 0.0

    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(iou(boxes[i], boxes[k]) <= thr for k in keep):
            keep.append(i)
    return keep


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Acceptance criteria report: tests append (number, passed, detail); the
# summary prints one line per criterion, FAIL for any that never reported.
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not any(item.startswith("test_acceptance") for item in _collected_modules(terminalreporter)):
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        ok, detail = ACCEPTANCE_RESULTS.get(n, (False, "no result recorded"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def _collected_modules(terminalreporter):
    stats = terminalreporter.stats
    names = set()
    for reports in stats.values():
        for r in reports:
            nodeid = getattr(r, "nodeid", "")
            if nodeid:
                names.add(nodeid.split("/")[-1].split("::")[0])
    return names
