"""im2col convolution and average pooling kernels (NCHW, square kernels)."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def pad_amounts(size, kernel, stride, padding):
    """Return (before, after, out_size) along one spatial axis."""
    if padding == "valid":
        return 0, 0, (size - kernel) // stride + 1
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2, out


def _pad(x, kernel, stride, padding):
    _, _, h, w = x.shape
    t, b, oh = pad_amounts(h, kernel, stride, padding)
    l, r, ow = pad_amounts(w, kernel, stride, padding)
    if t or b or l or r:
        x = np.pad(x, ((0, 0), (0, 0), (t, b), (l, r)))
    return x, (t, b, l, r), oh, ow


def im2col(x, kernel, stride, padding):
    """Patches of shape (n, oh, ow, c * k * k)."""
    xp, _, oh, ow = _pad(x, kernel, stride, padding)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    n, c = x.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh, ow, c * kernel * kernel)


def col2im(cols, x_shape, kernel, stride, padding):
    """Adjoint of im2col: scatter-add patch gradients back to an input-shaped array."""
    n, c, h, w = x_shape
    t, b, oh = pad_amounts(h, kernel, stride, padding)
    l, r, ow = pad_amounts(w, kernel, stride, padding)
    cols = cols.reshape(n, oh, ow, c, kernel, kernel)
    out = np.zeros((n, c, h + t + b, w + l + r))
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return out[:, :, t : t + h, l : l + w]


def conv_forward(x, weight, bias, stride, padding):
    cout, _, k, _ = weight.shape
    cols = im2col(x, k, stride, padding)
    out = cols @ weight.reshape(cout, -1).T
    if bias is not None:
        out = out + bias
    return out.transpose(0, 3, 1, 2)


def conv_backward(x, weight, g, stride, padding):
    """Gradients (dx, dW, db) of sum(g * conv(x, W, b))."""
    cout, _, k, _ = weight.shape
    cols = im2col(x, k, stride, padding)
    gm = g.transpose(0, 2, 3, 1)
    dw = np.einsum("nhwo,nhwp->op", gm, cols).reshape(weight.shape)
    db = gm.sum(axis=(0, 1, 2))
    dcols = gm @ weight.reshape(cout, -1)
    dx = col2im(dcols, x.shape, k, stride, padding)
    return dx, dw, db


def avgpool_forward(x, k):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))


def avgpool_backward(g, k):
    return np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
