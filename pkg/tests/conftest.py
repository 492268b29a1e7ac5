import pytest
import torch

from deskllm.config import ModelConfig
from deskllm.corpus import read_documents, toy_corpus_path
from deskllm.model import build_model
from deskllm.tokenizer import train_vocabulary


@pytest.fixture(scope="session")
def toy_docs():
    return read_documents(toy_corpus_path())


@pytest.fixture(scope="session")
def small_vocab(toy_docs):
    return train_vocabulary(toy_docs, 600)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def tiny_model(precision="fp64", seed=0, **kw):
    params = dict(vocab_size=61, hidden=16, n_heads=2, n_layers=2, train_context=16, precision=precision)
    params.update(kw)
    model = build_model(ModelConfig(**params), seed=seed)
    # Random non-trivial biases and gains so every parameter family is exercised.
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.copy_(0.1 * torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype))
            elif name.endswith("norm"):
                p.copy_(1 + 0.1 * torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype))
    return model.eval()


def finite_difference_check(model, batch, n_params=200, h=1e-4, seed=0):
    """Fourth-order central differences on randomly chosen scalar parameters, every tensor visited at least once.

    Returns (max relative error, names of the tensors sampled).
    """
    from deskllm.training import masked_cross_entropy

    def loss_fn():
        logits = model(batch.inputs)
        return masked_cross_entropy(logits, batch.targets, batch.loss_mask)[0]

    model.zero_grad()
    loss_fn().backward()
    params = list(model.named_parameters())
    g = torch.Generator().manual_seed(seed)
    picks = [i % len(params) for i in range(len(params))]
    picks += torch.randint(0, len(params), (n_params - len(picks),), generator=g).tolist()
    worst = 0.0
    seen = set()
    with torch.no_grad():
        for k in picks:
            name, p = params[k]
            flat = p.view(-1)
            j = int(torch.randint(0, flat.numel(), (1,), generator=g))
            orig = flat[j].item()
            vals = []
            for step in (2 * h, h, -h, -2 * h):
                flat[j] = orig + step
                vals.append(loss_fn().item())
            flat[j] = orig
            numeric = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
            analytic = p.grad.view(-1)[j].item()
            rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-6)
            worst = max(worst, rel)
            seen.add(name)
    return worst, seen


def random_batch(vocab, batch=3, length=12, seed=0, masked=True):
    from deskllm.training import Batch
    g = torch.Generator().manual_seed(seed)
    x = torch.randint(0, vocab, (batch, length + 1), generator=g)
    mask = (torch.rand(batch, length, generator=g) > 0.3).long() if masked else torch.ones(batch, length, dtype=torch.long)
    mask[0, 0] = 1
    return Batch(x[:, :-1], x[:, 1:], mask)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
