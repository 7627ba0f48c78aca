import threading

import pytest
import torch

from ehmavatar.geometry import DTYPE
from ehmavatar.parallel import fan_out, get_threads, map_frames, ordered_sum, set_threads


@pytest.fixture(autouse=True)
def _reset():
    yield
    set_threads(1)


def test_map_frames_keeps_frame_order():
    set_threads(4)
    seen = set()

    def fn(f):
        seen.add(threading.get_ident())
        return f * f

    assert map_frames(fn, 20) == [f * f for f in range(20)]
    assert get_threads() == 4 and torch.get_num_threads() == 1


def test_thread_count_is_validated():
    with pytest.raises(ValueError):
        set_threads(0)


def test_ordered_sum_is_left_to_right():
    big, one, neg = (torch.tensor(v, dtype=DTYPE) for v in (1e16, 1.0, -1e16))
    assert float(ordered_sum([big, one, neg])) == 0.0
    assert float(ordered_sum([big, neg, one])) == 1.0


def test_fan_out_sums_gradients_of_all_copies():
    x = torch.tensor([1.0, 2.0], dtype=DTYPE, requires_grad=True)
    a, b, c = fan_out(x, 3)
    assert all(torch.equal(t, x.detach()) for t in (a, b, c))
    (a.sum() + 2 * (b ** 2).sum()).backward()  # c unused
    assert x.grad.tolist() == [1.0 + 4.0, 1.0 + 8.0]


def test_fan_out_passes_constants_through():
    x = torch.ones(3, dtype=DTYPE)
    copies = fan_out(x, 2)
    assert copies[0] is x and copies[1] is x


def test_threaded_backward_is_bit_identical():
    torch.manual_seed(0)
    x = torch.randn(64, dtype=DTYPE)
    weights = [torch.randn(64, 64, dtype=DTYPE) for _ in range(16)]

    def grad_with(threads):
        set_threads(threads)
        leaf = x.clone().requires_grad_(True)
        copies = fan_out(leaf, len(weights))
        terms = map_frames(lambda i: torch.tanh(weights[i] @ copies[i]).sum(), len(weights))
        ordered_sum(terms).backward()
        return leaf.grad

    ref = grad_with(1)
    for _ in range(3):
        assert torch.equal(grad_with(4), ref)
