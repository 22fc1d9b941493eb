"""Independent reference: the whole network unrolled over time as a torch autograd graph.

Only the Heaviside step gets a hand-written backward (the rectangle
surrogate); every other derivative, including the reset branch of the
membrane update, comes from autograd on the literal forward expressions.
"""

import numpy as np
import torch
import torch.nn.functional as F

torch.set_default_dtype(torch.float64)


class _Spike(torch.autograd.Function):
    @staticmethod
    def forward(ctx, u, v_th, a):
        ctx.save_for_backward(u)
        ctx.v_th, ctx.a = v_th, a
        return (u >= v_th).to(u.dtype)

    @staticmethod
    def backward(ctx, g):
        (u,) = ctx.saved_tensors
        window = ((u - ctx.v_th).abs() < ctx.a / 2).to(u.dtype) / ctx.a
        return g * window, None, None


def lif(xs, cfg):
    """xs: list of per-step tensors; returns list of spike tensors."""
    h = torch.full_like(xs[0], cfg.v_reset)
    out = []
    for x in xs:
        u = h + x
        s = _Spike.apply(u, cfg.v_th, cfg.a)
        reset_s = s.detach() if cfg.detach_reset else s
        h = cfg.tau * u * (1 - reset_s) + cfg.v_reset * reset_s
        out.append(s)
    return out


def conv(x, w, stride, padding):
    top, bottom, left, right = padding
    x = F.pad(x, (left, right, top, bottom))
    return F.conv2d(x, w, stride=stride)


def bn(x, gamma, beta, eps, train=True, running=None):
    if train:
        mean = x.mean(dim=(0, 2, 3))
        var = x.var(dim=(0, 2, 3), unbiased=False)
    else:
        mean, var = running
    xhat = (x - mean[None, :, None, None]) / torch.sqrt(var[None, :, None, None] + eps)
    return xhat * gamma[None, :, None, None] + beta[None, :, None, None]


def _t(a):
    return torch.tensor(np.asarray(a), dtype=torch.float64, requires_grad=True)


def network_loss_and_grads(net, images, labels):
    """Train-mode loss and parameter gradients of ``net`` computed by autograd."""
    params = {k: _t(v) for k, v in net.named_parameters().items()}
    spec = net.spec
    T = spec.T
    lifc = spec.lif
    x = torch.tensor(images)
    enc = net.encoder
    if enc.scheme == "direct" or enc.scheme == "gac":
        stem = bn(conv(x, params["encoder.conv"], enc.conv.stride, enc.conv.padding),
                  params["encoder.bn_gamma"], params["encoder.bn_beta"], enc.bn.eps)
        xs = [stem] * T
        spikes = lif(xs, enc.lif)
        if enc.scheme == "direct":
            seq = spikes
        else:
            xt = torch.stack(xs)  # [T, B, C, H, W]
            m = 0
            for pool in ("avg", "max"):
                flat = xt.reshape(T, xt.shape[1], -1)
                v = flat.mean(-1) if pool == "avg" else flat.max(-1).values  # [T, B]
                z = params["encoder.w_n"] @ v
                m = m + params["encoder.w_m"] @ torch.relu(z)
            n = conv(stem, params["encoder.sca"], enc.gau.sca.stride, enc.gau.sca.padding)
            seq = [torch.sigmoid(m[t][:, None, None, None] * n) * spikes[t] for t in range(T)]
    else:
        seq = [torch.tensor(a) for a in net.encode(images).data]

    for i, blk in enumerate(net.blocks):
        pre = f"blocks.{i}."
        s1 = lif(seq, lifc)
        s1cat = torch.cat(s1)  # time folded into batch
        c1 = bn(conv(s1cat, params[pre + "conv1"], blk.conv1.p.stride, blk.conv1.p.padding),
                params[pre + "bn1.gamma"], params[pre + "bn1.beta"], blk.bn1.p.eps)
        if not hasattr(blk, "conv2"):
            seq = list(c1.chunk(T))
            continue
        s2 = lif(list(c1.chunk(T)), lifc)
        c2 = bn(conv(torch.cat(s2), params[pre + "conv2"], blk.conv2.p.stride, blk.conv2.p.padding),
                params[pre + "bn2.gamma"], params[pre + "bn2.beta"], blk.bn2.p.eps)
        if blk.proj:
            sc = bn(conv(s1cat, params[pre + "conv_sc"], blk.conv_sc.p.stride, blk.conv_sc.p.padding),
                    params[pre + "bn_sc.gamma"], params[pre + "bn_sc.beta"], blk.bn_sc.p.eps)
        else:
            sc = torch.cat(seq)
        seq = list((sc + c2).chunk(T))

    sh = lif(seq, lifc)
    p = spec.head_pool
    outs = [F.adaptive_avg_pool2d(s, p).flatten(1) @ params["head.fc"].T for s in sh]
    k = torch.stack(outs).mean(0)
    loss = F.cross_entropy(k, torch.tensor(labels))
    loss.backward()
    grads = {name: p.grad.numpy() if p.grad is not None else np.zeros(p.shape) for name, p in params.items()}
    return loss.item(), grads, k.detach().numpy()
