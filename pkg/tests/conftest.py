import numpy as np
import pytest

from blockpred import pseudo_label, worldgen


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """4-sequence dataset shared across tests (read-only)."""
    root = tmp_path_factory.mktemp("ds")
    config = worldgen.WorldConfig(n_sequences=4, split=(0.5, 0.25, 0.25))
    manifest = worldgen.generate_dataset(config, str(root), seed=7)
    return manifest


@pytest.fixture(scope="session")
def small_annotations(small_dataset, tmp_path_factory):
    path = tmp_path_factory.mktemp("ann") / "annotations.json"
    records = pseudo_label.annotate_dataset(small_dataset, str(path))
    return records, str(path)


def flood_fill_components(mask, connectivity=8):
    """Brute-force BFS flood fill; independent oracle for labeling."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    seen = np.zeros_like(mask)
    if connectivity == 8:
        nbrs = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
                if (dy, dx) != (0, 0)]
    else:
        nbrs = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    comps = []
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or seen[sy, sx]:
                continue
            queue = [(sy, sx)]
            seen[sy, sx] = True
            comp = set()
            while queue:
                y, x = queue.pop()
                comp.add((y, x))
                for dy, dx in nbrs:
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            comps.append(comp)
    return comps


def finite_difference_grad(fn, x, eps=1e-3):
    """Central-difference gradient of scalar fn w.r.t. tensor x."""
    import torch

    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(fn(x))
            flat[i] = orig - eps
            lo = float(fn(x))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
    return grad


def rel_error(a, b):
    import torch

    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom
