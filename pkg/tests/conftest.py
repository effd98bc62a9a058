"""Shared oracles and helpers for the test suite."""

import numpy as np
import torch


def bilinear_lookup_rows(img, x_cont):
    """Reference row-wise bilinear lookup of ``img`` at continuous columns.

    ``x_cont`` has one entry per pixel; out-of-range neighbours contribute
    nothing (their weight is dropped, matching zero padding of weights).
    """
    h, w = img.shape[:2]
    x0 = np.floor(x_cont)
    frac = x_cont - x0
    i0 = np.clip(x0.astype(np.int64), 0, w - 1)
    i1 = np.clip(i0 + 1, 0, w - 1)
    rows = np.arange(h, dtype=np.int64)[:, None]
    w0 = (1.0 - frac)[..., None] if img.ndim == 3 else (1.0 - frac)
    w1 = frac[..., None] if img.ndim == 3 else frac
    return w0 * img[rows, i0] + w1 * img[rows, i1]


def sample_bilinear_scalar(feat, x, y):
    """Scalar bilinear sample of ``feat`` (C, H, W) at one point.

    Zero padding outside [0, w-1] x [0, h-1]; the oracle counterpart of the
    vectorised samplers, written index by index on purpose.
    """
    c, h, w = feat.shape
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    out = np.zeros(c, dtype=np.float64)
    for dx in (0, 1):
        for dy in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            wx = 1.0 - abs(x - xi)
            wy = 1.0 - abs(y - yi)
            if wx <= 0.0 or wy <= 0.0:
                continue
            if 0 <= xi < w and 0 <= yi < h:
                out += wx * wy * feat[:, yi, xi]
    return out


class _KinkRecorder:
    """Captures the piecewise-linear cell each nonsmooth op lands in.

    Central differences only estimate a derivative where the function is
    smooth on [x - h, x + h].  A perturbation that pushes a ReLU
    preactivation (or a sampling coordinate) across its kink makes the
    comparison meaningless for that one entry, so the checker records the
    cell signature of every evaluation and drops entries whose signature
    moved.  Coverage is reported so a check cannot silently exclude
    everything.
    """

    def __init__(self, module):
        from greaten.layers import ConvINReLU

        self.signature = None
        self._current = []
        self._handles = []
        if module is None:
            return
        for m in module.modules():
            if isinstance(m, ConvINReLU):
                self._handles.append(
                    m.norm.register_forward_hook(self._record_relu_sign)
                )
            elif isinstance(m, torch.nn.ReLU):
                self._handles.append(m.register_forward_hook(self._record_relu_sign))
            elif hasattr(m, "kink_signature"):
                self._handles.append(
                    m.register_forward_hook(self._record_module_signature)
                )

    def _record_relu_sign(self, module, inputs, output):
        self._current.append(output.detach() > 0)

    def _record_module_signature(self, module, inputs, output):
        self._current.append(module.kink_signature())

    def capture(self, fn):
        """Runs ``fn`` and returns (value, cell signature)."""
        self._current = []
        value = fn()
        sig, self._current = self._current, []
        return value, sig

    @staticmethod
    def same_cell(sig_a, sig_b):
        return all(torch.equal(a, b) for a, b in zip(sig_a, sig_b))

    def close(self):
        for h in self._handles:
            h.remove()


def gradcheck_norm_error(loss_fn, tensors, module=None, step=1e-3, min_coverage=0.5):
    """Worst relative error between analytic and central-difference gradients.

    Relative error is measured per tensor as ||g_a - g_fd|| divided by the
    larger of the two norms (floored at 1e-6 so tensors whose true gradient
    vanishes, e.g. conv biases ahead of instance norm, compare on an absolute
    scale) over the entries whose perturbed evaluations stay inside the same
    smooth cell (see _KinkRecorder); entries that cross a kink are excluded
    and the surviving fraction must stay above ``min_coverage``.  The
    difference quotient is Richardson-extrapolated from steps h and h/2 to
    cancel the h^2 truncation term, which otherwise dominates near strongly
    curved spots such as instance norm over very few spatial elements.
    Everything must be float64.
    """
    for t in tensors:
        assert t.dtype == torch.float64, "gradcheck requires float64 tensors"
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, tensors, allow_unused=False)
    recorder = _KinkRecorder(module)
    try:
        with torch.no_grad():
            _, base_sig = recorder.capture(loss_fn)
            worst = 0.0
            total = valid_total = 0
            for t, g_a in zip(tensors, analytic):
                flat = t.view(-1)
                fd = torch.zeros_like(flat)
                valid = torch.ones(flat.numel(), dtype=torch.bool)
                for i in range(flat.numel()):
                    orig = flat[i].item()
                    quotients = []
                    in_cell = True
                    for h in (step, step / 2.0):
                        flat[i] = orig + h
                        hi, hi_sig = recorder.capture(loss_fn)
                        flat[i] = orig - h
                        lo, lo_sig = recorder.capture(loss_fn)
                        quotients.append((hi.item() - lo.item()) / (2.0 * h))
                        in_cell = in_cell and (
                            recorder.same_cell(base_sig, hi_sig)
                            and recorder.same_cell(base_sig, lo_sig)
                        )
                    flat[i] = orig
                    fd[i] = (4.0 * quotients[1] - quotients[0]) / 3.0
                    valid[i] = in_cell
                total += flat.numel()
                valid_total += int(valid.sum())
                g_a_v = g_a.view(-1)[valid]
                g_fd_v = fd[valid]
                denom = max(g_fd_v.norm().item(), g_a_v.norm().item(), 1e-6)
                worst = max(worst, (g_a_v - g_fd_v).norm().item() / denom)
    finally:
        recorder.close()
    coverage = valid_total / max(total, 1)
    assert coverage >= min_coverage, (
        f"only {coverage:.1%} of perturbed entries stayed inside a smooth cell"
    )
    return worst


def projection_loss(output, seed=0):
    """Fixed random projection collapsing any tensor (or dict of tensors) to a scalar."""
    if isinstance(output, dict):
        parts = [output[k] for k in sorted(output)]
    elif isinstance(output, (list, tuple)):
        parts = list(output)
    else:
        parts = [output]
    gen = torch.Generator().manual_seed(seed)
    total = None
    for p in parts:
        w = torch.rand(p.shape, generator=gen, dtype=torch.float64)
        term = (p * w).sum()
        total = term if total is None else total + term
    return total


def depth_edge_mask(prim_id, margin=2):
    """Pixels within ``margin`` of a primitive-id boundary."""
    edge = np.zeros(prim_id.shape, dtype=bool)
    edge[1:] |= prim_id[1:] != prim_id[:-1]
    edge[:-1] |= prim_id[1:] != prim_id[:-1]
    edge[:, 1:] |= prim_id[:, 1:] != prim_id[:, :-1]
    edge[:, :-1] |= prim_id[:, 1:] != prim_id[:, :-1]
    out = edge.copy()
    for _ in range(margin):
        grown = out.copy()
        grown[1:] |= out[:-1]
        grown[:-1] |= out[1:]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out
