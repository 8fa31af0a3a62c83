"""Zhang-Suen thinning with a topology guard.

Pixels are flagged for deletion exactly as in Zhang and Suen's two
sub-iterations, evaluated on the image as it stood at the start of the
sub-iteration.  The flagged pixels are then removed in four parity
subfields (no two pixels of one subfield are 8-adjacent) and each is
re-tested for simplicity on the current image first, so parallel deletion
can never split or erase a component.  A final pass strips pixels that are
simple but not needed for 8-connectivity (staircase corners, the 2x2 blocks
plain Zhang-Suen leaves at some junctions).
"""
import logging

import numpy as np

log = logging.getLogger(__name__)

# Ring order starting north, clockwise: P2..P9 in Zhang-Suen notation.
RING = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def _bits(code):
    return [(code >> k) & 1 for k in range(8)]


def _build_luts():
    step1 = np.zeros(256, bool)
    step2 = np.zeros(256, bool)
    safe = np.zeros(256, bool)
    redundant = np.zeros(256, bool)
    for code in range(256):
        p = _bits(code)
        p2, p3, p4, p5, p6, p7, p8, p9 = p
        b = sum(p)
        a = sum(1 for k in range(8) if p[k] == 0 and p[(k + 1) % 8] == 1)
        base = 2 <= b <= 6 and a == 1
        step1[code] = base and p2 * p4 * p6 == 0 and p4 * p6 * p8 == 0
        step2[code] = base and p2 * p4 * p8 == 0 and p2 * p6 * p8 == 0
        # Yokoi 8-connectivity number; 1 means deleting the pixel keeps topology.
        q = [1 - v for v in p]
        yokoi = sum(q[k] - q[k] * q[(k + 1) % 8] * q[(k + 2) % 8] for k in (0, 2, 4, 6))
        safe[code] = b >= 1 and yokoi == 1
        redundant[code] = b >= 2 and yokoi == 1
    return step1, step2, safe, redundant


_STEP1, _STEP2, _SAFE, _REDUNDANT = _build_luts()


def neighbour_codes(img):
    """8-bit neighbourhood code of every interior pixel of a zero-padded image."""
    h, w = img.shape
    code = np.zeros((h - 2, w - 2), np.uint8)
    for k, (dr, dc) in enumerate(RING):
        code |= img[1 + dr : h - 1 + dr, 1 + dc : w - 1 + dc].astype(np.uint8) << k
    return code


def _parity_masks(mask):
    # Parity is counted from the foreground bounding box, not the array
    # origin, so padding or shifting the image never changes the result.
    occupied = np.argwhere(mask)
    r0, c0 = occupied.min(axis=0) if len(occupied) else (0, 0)
    rows = (np.arange(mask.shape[0])[:, None] - r0) % 2
    cols = (np.arange(mask.shape[1])[None, :] - c0) % 2
    return [(rows == pr) & (cols == pc) for pr in (0, 1) for pc in (0, 1)]


def _delete_in_subfields(img, flagged, lut, parities):
    inner = img[1:-1, 1:-1]
    removed = False
    for par in parities:
        sub = flagged & par
        if not sub.any():
            continue
        ok = sub & lut[neighbour_codes(img)] & inner
        if ok.any():
            inner &= ~ok
            removed = True
    return removed


def _two_by_two(img):
    return img[:-1, :-1] & img[1:, :-1] & img[:-1, 1:] & img[1:, 1:]


def skeletonize(mask):
    """Thin a boolean mask to a 1-pixel-wide, topology-preserving centreline."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    img = np.pad(mask, 1)
    parities = _parity_masks(mask)
    while True:
        changed = True
        while changed:
            changed = False
            for lut in (_STEP1, _STEP2):
                inner = img[1:-1, 1:-1]
                flagged = inner & lut[neighbour_codes(img)]
                if flagged.any():
                    changed |= _delete_in_subfields(img, flagged, _SAFE, parities)
        inner = img[1:-1, 1:-1]
        if _delete_in_subfields(img, inner.copy(), _REDUNDANT, parities):
            continue
        blocks = _two_by_two(inner)
        if not blocks.any():
            break
        # Only reachable for an X-crossing whose 2x2 core has no simple pixel.
        r, c = np.argwhere(blocks)[0]
        log.debug("breaking residual 2x2 block at row %d col %d", r, c)
        inner[r, c] = False
    return img[1:-1, 1:-1].copy()


def is_thin(skel):
    skel = np.asarray(skel, dtype=bool)
    return not _two_by_two(skel).any()
