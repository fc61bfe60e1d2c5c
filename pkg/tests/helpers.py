import numpy as np

from esesim.encode import encode_csc
from esesim.quantize import FixedFormat, QuantizedTensor


def balanced_w_ix(n_pe: int = 32, rows: int = 1024, cols: int = 153, per_pe: int = 572):
    """Encoded matrix with identical per-PE, per-column loads and no padding."""
    base, extra = divmod(per_pe, cols)
    counts = np.full(cols, base)
    counts[:extra] += 1
    kept = np.zeros((rows, cols), dtype=bool)
    for j, k in enumerate(counts):
        kept[: k * n_pe, j] = True  # local rows 0..k-1 of every PE
    q = QuantizedTensor(np.where(kept, 7, 0), FixedFormat(12, 4))
    return encode_csc(q, kept, n_pe)[0]
