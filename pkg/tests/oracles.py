"""Independent brute-force references the tests compare the implementation against.

Everything here is written directly from the mathematical definitions with
plain numpy (matrix ops, no tiling, no truncation, no early exit), so it shares
no code path with the package internals it checks.
"""

import numpy as np


def quat_to_rot(q):
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def reference_render(colors, centers, log_scales, quats, opacities, pose, intr,
                     blur=0.3, alpha_clamp=0.995, znear=0.05):
    """Untruncated per-pixel compositor. Returns color, depth, opacity images
    plus, per pixel, the full list of composited sample alphas in depth order.
    """
    h, w = intr.height, intr.width
    w2c = np.linalg.inv(pose)
    rwc, twc = w2c[:3, :3], w2c[:3, 3]

    n = len(centers)
    cams = centers @ rwc.T + twc
    keep = cams[:, 2] > znear

    mean2 = np.zeros((n, 2))
    conics = np.zeros((n, 2, 2))
    for i in range(n):
        if not keep[i]:
            continue
        tx, ty, tz = cams[i]
        s = np.exp(log_scales[i])
        rot = quat_to_rot(quats[i])
        m = rot * s[None, :]
        sigma = m @ m.T
        jac = np.array([
            [intr.fx / tz, 0.0, -intr.fx * tx / tz ** 2],
            [0.0, intr.fy / tz, -intr.fy * ty / tz ** 2],
        ])
        a = jac @ rwc
        cov2 = a @ sigma @ a.T + blur * np.eye(2)
        det = np.linalg.det(cov2)
        if det <= 1e-12:
            keep[i] = False
            continue
        conics[i] = np.linalg.inv(cov2)
        mean2[i] = [intr.fx * tx / tz + intr.cx, intr.fy * ty / tz + intr.cy]

    order = [int(i) for i in np.argsort(cams[:, 2], kind="stable") if keep[i]]

    out_c = np.zeros((h, w, 3))
    out_d = np.zeros((h, w))
    out_o = np.zeros((h, w))
    contribs = [[[] for _ in range(w)] for _ in range(h)]
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs + 0.5
    py = ys + 0.5
    trans = np.ones((h, w))
    for i in order:
        dx = px - mean2[i, 0]
        dy = py - mean2[i, 1]
        q = conics[i]
        e = -0.5 * (q[0, 0] * dx * dx + q[1, 1] * dy * dy) - q[0, 1] * dx * dy
        f = np.minimum(opacities[i] * np.exp(e), alpha_clamp)
        wgt = f * trans
        out_c += wgt[..., None] * colors[i]
        out_d += wgt * cams[i, 2]
        out_o += wgt
        for r in range(h):
            for c in range(w):
                contribs[r][c].append(f[r, c])
        trans = trans * (1.0 - f)
    return out_c, out_d, out_o, contribs


def reference_ssim(x, y, window=11, sigma=1.5):
    """Direct windowed SSIM: explicit per-pixel loops, zero padding."""
    half = window // 2
    xs = np.arange(window) - half
    k1 = np.exp(-0.5 * (xs / sigma) ** 2)
    k1 /= k1.sum()
    kern = np.outer(k1, k1)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    h, w, nch = x.shape
    xp = np.zeros((h + 2 * half, w + 2 * half, nch))
    yp = np.zeros_like(xp)
    xp[half:half + h, half:half + w] = x
    yp[half:half + h, half:half + w] = y
    vals = []
    for ch in range(nch):
        total = 0.0
        for i in range(h):
            for j in range(w):
                wx = xp[i:i + window, j:j + window, ch]
                wy = yp[i:i + window, j:j + window, ch]
                mx = (kern * wx).sum()
                my = (kern * wy).sum()
                vxx = (kern * wx * wx).sum() - mx * mx
                vyy = (kern * wy * wy).sum() - my * my
                vxy = (kern * wx * wy).sum() - mx * my
                total += ((2 * mx * my + c1) * (2 * vxy + c2)) / ((mx * mx + my * my + c1) * (vxx + vyy + c2))
        vals.append(total / (h * w))
    return float(np.mean(vals))


def random_gaussian_scene(rng, n, spread=1.0):
    """Random primitive parameters in front of a camera at the origin facing +x."""
    centers = np.column_stack([
        rng.uniform(1.0, 4.0, n),
        rng.uniform(-spread, spread, n),
        rng.uniform(-spread, spread, n),
    ])
    log_scales = np.log(rng.uniform(0.05, 0.4, (n, 3)))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    opacities = rng.uniform(0.15, 0.9, n)
    colors = rng.uniform(0.05, 0.95, (n, 3))
    return colors, centers, log_scales, quats, opacities


def hull_volume_bruteforce(pts):
    """Convex hull volume by exhaustive facet enumeration.

    Every point triple whose plane has all remaining points on one side is a
    hull facet; the volume is the sum of tetrahedra from the centroid to each
    facet. Only valid for points in general position (no 4 coplanar hull
    points), which random clouds satisfy almost surely.
    """
    pts = np.asarray(pts, dtype=np.float64)
    n = len(pts)
    centroid = pts.mean(axis=0)
    volume = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                normal = np.cross(pts[j] - pts[i], pts[k] - pts[i])
                norm = np.linalg.norm(normal)
                if norm < 1e-12:
                    continue
                side = (pts - pts[i]) @ normal
                if np.all(side <= 1e-9) or np.all(side >= -1e-9):
                    volume += abs(np.linalg.det(np.stack([
                        pts[i] - centroid, pts[j] - centroid, pts[k] - centroid
                    ]))) / 6.0
    return volume


def shortest_path_bruteforce(adj, src, dst):
    """Minimal path by exhaustive simple-path enumeration.

    `adj` maps node id to (neighbor, weight) pairs. Returns (path, length),
    or (None, inf) when no path exists. Exponential; only for tiny graphs.
    """
    import math

    if src == dst:
        return [src], 0.0
    best_len = math.inf
    best_path = None

    def dfs(u, seen, length, path):
        nonlocal best_len, best_path
        if u == dst:
            if length < best_len:
                best_len = length
                best_path = list(path)
            return
        for v, w in adj[u]:
            if v in seen or v == u:
                continue
            seen.add(v)
            path.append(v)
            dfs(v, seen, length + w, path)
            path.pop()
            seen.remove(v)

    dfs(src, {src}, 0.0, [src])
    return best_path, best_len


def upgma_bruteforce(dist_matrix):
    """Naive average-linkage agglomeration over an explicit distance matrix.

    Repeatedly merges the cluster pair whose mean pairwise original distance
    is smallest; returns the full merge list as (members_a, members_b, dist)
    in merge order. Quadratic scans make it an independent check on library
    clustering, not a usable implementation.
    """
    D = np.asarray(dist_matrix, dtype=np.float64)
    clusters = [frozenset([i]) for i in range(D.shape[0])]
    merges = []
    while len(clusters) > 1:
        best = None
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                avg = float(np.mean([D[a, b] for a in clusters[i] for b in clusters[j]]))
                if best is None or avg < best[0]:
                    best = (avg, i, j)
        avg, i, j = best
        merges.append((clusters[i], clusters[j], avg))
        merged = clusters[i] | clusters[j]
        clusters = [c for k, c in enumerate(clusters) if k not in (i, j)]
        clusters.append(merged)
    return merges
