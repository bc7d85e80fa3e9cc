# Independent numpy oracle for the CLAHE / median / percentile chain.
import numpy as np

def image(h, w):
    y, x = np.mgrid[0:h, 0:w]
    return (((y * y * 3 + x * 5 + (x * y) % 7) % 64) / 64.0).astype(np.float32)

def clahe(img, tiles, bins, clip):
    h, w = img.shape
    ty, tx = max(1, min(tiles, h)), max(1, min(tiles, w))
    rb = [(i * h // ty, (i + 1) * h // ty) for i in range(ty)]
    cb = [(j * w // tx, (j + 1) * w // tx) for j in range(tx)]
    v = np.clip(img.astype(np.float64), 0, 1)
    b = np.minimum(np.floor(v * bins).astype(int), bins - 1)
    maps = np.zeros((ty, tx, bins))
    for i, (y0, y1) in enumerate(rb):
        for j, (x0, x1) in enumerate(cb):
            hist = np.bincount(b[y0:y1, x0:x1].ravel(), minlength=bins).astype(float)
            n = (y1 - y0) * (x1 - x0)
            lim = max(1.0, clip * n)
            ex = np.sum(np.maximum(hist - lim, 0))
            hist = np.minimum(hist, lim) + ex / bins
            maps[i, j] = np.cumsum(hist) / n
    cy = np.array([(a + c - 1) / 2 for a, c in rb])
    cx = np.array([(a + c - 1) / 2 for a, c in cb])
    def weights(c, n):
        # fractional tile index, clamped at the outer centres
        f = np.interp(np.arange(n), c, np.arange(len(c)))
        i0 = np.floor(f).astype(int)
        i1 = np.minimum(i0 + 1, len(c) - 1)
        return i0, i1, f - i0
    i0, i1, fy = weights(cy, h)
    j0, j1, fx = weights(cx, w)
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            m = lambda i, j: maps[i, j, b[y, x]]
            top = m(i0[y], j0[x]) * (1 - fx[x]) + m(i0[y], j1[x]) * fx[x]
            bot = m(i1[y], j0[x]) * (1 - fx[x]) + m(i1[y], j1[x]) * fx[x]
            out[y, x] = top * (1 - fy[y]) + bot * fy[y]
    return out.astype(np.float32)

def median3(img):
    p = np.pad(img, 1, mode="edge")
    h, w = img.shape
    win = np.stack([p[dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)])
    return np.median(win, axis=0).astype(np.float32)

def clip_rescale(img, lo_p, hi_p):
    v = img.astype(np.float64)
    lo, hi = np.percentile(v, lo_p), np.percentile(v, hi_p)
    return ((np.clip(v, lo, hi) - lo).astype(np.float32) / np.float32(hi - lo)).astype(np.float32)

def fmt(a):
    return ", ".join(f"{v:.7}" for v in a.ravel())

img = image(12, 10)
print("CLAHE_3_16_005:", fmt(clahe(img, 3, 16, 0.05)))
img = image(24, 20)
full = clip_rescale(median3(clahe(img, 8, 256, 0.01)), 2, 98)
print("NORMALIZED:", fmt(full))
