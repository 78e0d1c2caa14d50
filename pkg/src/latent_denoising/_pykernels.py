"""Pure-Python versions of the inner loops in ``_ckernels.pyx``.

Each function performs the same floating-point operations in the same order as
its compiled twin, so the two backends agree bit for bit.
"""
import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data):
    h = FNV_OFFSET
    for byte in bytes(data):
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def weighted_draws(weights, uniforms):
    pool = [float(w) for w in weights]
    out = np.empty(len(uniforms), dtype=np.int64)
    for t, u in enumerate(uniforms):
        total = 0.0
        for w in pool:
            total += w
        target = float(u) * total
        acc = 0.0
        chosen = -1
        last = -1
        for i, w in enumerate(pool):
            if w > 0.0:
                last = i
                acc += w
                if target < acc:
                    chosen = i
                    break
        if chosen < 0:
            chosen = last
        out[t] = chosen
        pool[chosen] = 0.0
    return out


def glass_shuffle(img, radius, offsets):
    height, width = img.shape[:2]
    n_iter, n_rows, n_cols, _ = offsets.shape
    off = offsets.tolist()
    for it in range(n_iter):
        for a in range(n_rows):
            h = height - radius - a
            row = off[it][a]
            for b in range(n_cols):
                w = width - radius - b
                dy, dx = row[b]
                hp, wp = h + dy, w + dx
                tmp = img[h, w].copy()
                img[h, w] = img[hp, wp]
                img[hp, wp] = tmp
