import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from rbplan.invdyn import (BehaviorCloning, InverseDynamics, bc_loss, greedy_decode, invdyn_loss,
                           per_rb_accuracy, predict_action)


class StubDecoder:
    """Emits fixed logits per position, for testing the decoding contract."""

    def __init__(self, table, grid_shape):
        self.table = torch.as_tensor(table, dtype=torch.float32)  # (P, N)
        self.n_positions, self.n_nodes = self.table.shape
        self.grid_shape = grid_shape
        self.state_dim = 2

    def parameters(self):
        return iter([self.table])

    def start(self, inputs):
        return {"b": inputs.shape[0]}

    def step(self, ctx, prev, j):
        return self.table[j].expand(ctx["b"], -1), ctx


def test_greedy_decode_follows_argmax_per_position():
    n, p = 3, 6
    table = torch.zeros(p, n)
    for j in range(p):
        table[j, j % n] = 5.0
    stub = StubDecoder(table, (2, 3))
    grid = predict_action(stub, np.zeros((4, 2)), np.ones((4, 2)))
    assert grid.shape == (4, 2, 3)
    assert np.array_equal(grid[0], np.arange(6).reshape(2, 3) % 3)


def test_greedy_ties_break_to_lowest_index():
    stub = StubDecoder(torch.zeros(2, 4), (1, 2))
    assert greedy_decode(stub, torch.zeros(2)).tolist() == [[0, 0]]


def test_loss_is_log_n_for_uniform_logits():
    model = InverseDynamics(4, 5, 1, 3, state_embed=8, action_embed=4)
    for p in model.head[-1].parameters():
        torch.nn.init.zeros_(p)
    a = torch.randint(0, 5, (7, 3))
    loss = invdyn_loss(model, torch.randn(7, 4), a, torch.randn(7, 4))
    assert loss.item() == pytest.approx(math.log(5), abs=1e-6)


def test_teacher_forcing_uses_ground_truth_prefix():
    torch.manual_seed(0)
    model = InverseDynamics(2, 3, 1, 3, state_embed=8, action_embed=4)
    inputs = torch.randn(1, 4)
    a1, a2 = torch.tensor([[0, 1, 2]]), torch.tensor([[0, 2, 2]])
    l1, l2 = model.teacher_logits(inputs, a1), model.teacher_logits(inputs, a2)
    assert torch.equal(l1[:, :2], l2[:, :2])  # position j only sees choices before j
    assert not torch.equal(l1[:, 2], l2[:, 2])


def test_teacher_and_incremental_paths_agree():
    torch.manual_seed(1)
    model = InverseDynamics(3, 4, 2, 2, state_embed=8, action_embed=4)
    s, sn = torch.randn(5, 3), torch.randn(5, 3)
    grid = predict_action(model, s, sn)
    logits = model.teacher_logits(torch.cat([s, sn], -1), torch.as_tensor(grid))
    assert np.array_equal(logits.argmax(-1).numpy().reshape(grid.shape), grid)


def test_overfit_single_transition_reproduces_action():
    torch.manual_seed(0)
    model = InverseDynamics(4, 4, 2, 3, state_embed=16, action_embed=8)
    s, sn = torch.rand(1, 4), torch.rand(1, 4)
    a = torch.tensor([[[3, 1, 0], [2, 2, 1]]])
    opt = torch.optim.Adam(model.parameters(), lr=1e-2)
    for _ in range(150):
        loss = invdyn_loss(model, s, a.reshape(1, -1), sn)
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert np.array_equal(predict_action(model, s[0], sn[0]), a[0].numpy())
    assert per_rb_accuracy(model, torch.cat([s, sn], -1), a) == 1.0


def test_node_relabeling_covariance_on_two_nodes():
    # state layout (node0 features, node1 features); swapping nodes swaps both
    torch.manual_seed(0)
    model = BehaviorCloning(4, 2, 1, 2, state_embed=8, action_embed=4)
    s = torch.tensor([[1.0, 0.0, 0.2, 0.3]])
    a = torch.tensor([[0, 1]])
    logits = model.teacher_logits(s, a)
    manual = F.cross_entropy(logits.reshape(-1, 2), a.reshape(-1))
    assert bc_loss(model, s, a).item() == pytest.approx(manual.item())
    # a relabeled copy of the model (swap output rows and action-embedding rows) on swapped inputs
    swapped = BehaviorCloning(4, 2, 1, 2, state_embed=8, action_embed=4)
    swapped.load_state_dict(model.state_dict())
    with torch.no_grad():
        w = swapped.encoder[0].weight
        w.copy_(w[:, [2, 3, 0, 1]])
        swapped.head[-1].weight.copy_(swapped.head[-1].weight[[1, 0]])
        swapped.head[-1].bias.copy_(swapped.head[-1].bias[[1, 0]])
        swapped.action_embed.weight.copy_(swapped.action_embed.weight[[1, 0, 2]])
    s2 = s[:, [2, 3, 0, 1]]
    assert bc_loss(swapped, s2, 1 - a).item() == pytest.approx(bc_loss(model, s, a).item(), abs=1e-6)


def test_dimension_mismatch_and_validity():
    model = InverseDynamics(4, 3, 1, 2)
    with pytest.raises(ValueError, match="dimension-mismatch"):
        predict_action(model, torch.zeros(3), torch.zeros(3))
    grid = predict_action(model, torch.randn(6, 4), torch.randn(6, 4))
    assert grid.min() >= 0 and grid.max() < 3 and grid.dtype == np.int64
    with pytest.raises(ValueError):
        invdyn_loss(model, torch.zeros(0, 4), torch.zeros(0, 2, dtype=torch.long), torch.zeros(0, 4))
