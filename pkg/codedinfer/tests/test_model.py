
import json
import unittest
from pathlib import Path

import numpy as np

from codedinfer.core.errors import ParseError, ShapeMismatch
from codedinfer.core.model import init_weights, load_model, reference_activations, reference_forward
from codedinfer.core.types import DType, LayerKind
from codedinfer.core.weights import WeightStore

FIXTURES = Path(__file__).resolve().parents[2] / "fixtures"


def fc_model(rows, cols, activation="identity", bias=False):
    return load_model({
        "name": "one-fc",
        "layers": [{"id": 0, "kind": "fc", "inputs": cols, "outputs": rows,
                    "activation": activation, "bias": bias}],
    })


class TestLoadModel(unittest.TestCase):
    def test_fixture_shapes(self):
        model = load_model(FIXTURES / "models" / "tiny.json")
        self.assertEqual(model.name, "tiny")
        self.assertEqual([layer.kind for layer in model.layers],
                         [LayerKind.CONV, LayerKind.POOL, LayerKind.FC, LayerKind.FC])
        self.assertEqual(model.layers[0].output_shape, (6, 6, 4))
        self.assertEqual(model.layers[1].output_shape, (3, 3, 4))
        self.assertEqual(model.output_shape, (3,))
        self.assertEqual(model.fused_groups(), [[0, 1], [2], [3]])

    def test_case_model(self):
        model = load_model(FIXTURES / "models" / "case1.json")
        self.assertEqual(model.layers[0].output_shape, (8, 8, 32))
        self.assertEqual(model.layers[1].fc.inputs, 2048)

    def test_json_string_and_dict_agree(self):
        text = (FIXTURES / "models" / "fc.json").read_text()
        self.assertEqual(load_model(text), load_model(json.loads(text)))

    def test_to_dict_reloads(self):
        model = load_model(FIXTURES / "models" / "tiny.json")
        self.assertEqual(load_model(model.to_dict()), model)

    def test_shape_mismatch_names_layer(self):
        with self.assertRaises(ShapeMismatch) as ctx:
            load_model({
                "name": "bad",
                "layers": [
                    {"id": 0, "kind": "conv", "input": [4, 4, 1], "filters": 2, "size": 3},
                    {"id": 7, "kind": "fc", "inputs": 10, "outputs": 2},
                ],
            })
        self.assertEqual(ctx.exception.layer_id, 7)

    def test_conv_geometry_that_does_not_fit(self):
        with self.assertRaises(ShapeMismatch):
            load_model({"name": "bad", "layers": [
                {"id": 0, "kind": "conv", "input": [2, 2, 1], "filters": 1, "size": 5}]})

    def test_malformed_documents(self):
        with self.assertRaises(ParseError):
            load_model("{not json")
        with self.assertRaises(ParseError):
            load_model({"name": "x", "layers": []})
        with self.assertRaises(ParseError):
            load_model({"name": "x", "layers": [{"id": 0, "kind": "lstm"}]})
        with self.assertRaises(ParseError):
            load_model({"name": "dup", "layers": [
                {"id": 0, "kind": "fc", "inputs": 2, "outputs": 2},
                {"id": 0, "kind": "fc", "inputs": 2, "outputs": 2}]})

    def test_missing_file(self):
        with self.assertRaises(ParseError):
            load_model(FIXTURES / "models" / "does-not-exist.json")


class TestReferenceForward(unittest.TestCase):
    def test_single_fc(self):
        model = fc_model(2, 2)
        weights = WeightStore(DType.F64, weights={0: np.array([[1.0, 2.0], [3.0, 4.0]])})
        np.testing.assert_array_equal(reference_forward(model, weights, np.array([5.0, 6.0])), [17.0, 39.0])

    def test_bias_and_relu(self):
        model = fc_model(2, 2, activation="relu", bias=True)
        weights = WeightStore(DType.F64, weights={0: np.array([[1.0, 0.0], [0.0, -1.0]])},
                              biases={0: np.array([0.5, 0.5])})
        np.testing.assert_array_equal(reference_forward(model, weights, np.array([1.0, 2.0])), [1.5, 0.0])

    def test_zero_weights_give_zero_output(self):
        model = load_model(FIXTURES / "models" / "fc.json")
        weights = init_weights(model, seed=3, dtype=DType.F64)
        for layer_id in list(weights.weights):
            weights.weights[layer_id] = np.zeros_like(weights.weights[layer_id])
            weights.biases[layer_id] = np.zeros_like(weights.biases[layer_id])
        out = reference_forward(model, weights, np.ones(16))
        np.testing.assert_array_equal(out, np.zeros(4))

    def test_conv_then_max_pool(self):
        model = load_model({"name": "cp", "layers": [
            {"id": 0, "kind": "conv", "input": [2, 2, 1], "filters": 1, "size": 1, "bias": False},
            {"id": 1, "kind": "pool", "window": 2},
        ]})
        weights = WeightStore(DType.F64, weights={0: np.ones((1, 1, 1, 1))})
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
        np.testing.assert_array_equal(reference_forward(model, weights, x), [4.0])

    def test_two_layers_compose(self):
        model = load_model(FIXTURES / "models" / "fc.json")
        weights = init_weights(model, seed=1, dtype=DType.F64)
        x = np.linspace(-1, 1, 16)
        hidden = np.maximum(weights.weights[0] @ x + weights.biases[0], 0)
        expected = weights.weights[1] @ hidden + weights.biases[1]
        np.testing.assert_allclose(reference_forward(model, weights, x), expected, rtol=1e-12)

    def test_activations_per_layer(self):
        model = load_model(FIXTURES / "models" / "tiny.json")
        weights = init_weights(model, seed=0)
        acts = reference_activations(model, weights, np.ones((6, 6, 2), dtype=np.float32))
        self.assertEqual([a.shape for a in acts], [(6, 6, 4), (3, 3, 4), (8,), (3,)])

    def test_input_shape_checked(self):
        model = load_model(FIXTURES / "models" / "fc.json")
        with self.assertRaises(ShapeMismatch):
            reference_forward(model, init_weights(model), np.ones(15))


class TestInitWeights(unittest.TestCase):
    def test_deterministic_per_seed(self):
        model = load_model(FIXTURES / "models" / "tiny.json")
        self.assertTrue(init_weights(model, seed=5).equals(init_weights(model, seed=5)))
        self.assertFalse(init_weights(model, seed=5).equals(init_weights(model, seed=6)))

    def test_shapes_and_dtype(self):
        model = load_model(FIXTURES / "models" / "tiny.json")
        store = init_weights(model, dtype=DType.F64)
        self.assertEqual(store.weights[0].shape, (4, 3, 3, 2))
        self.assertEqual(store.weights[2].shape, (8, 36))
        self.assertNotIn(1, store.weights)
        self.assertEqual(store.weights[3].dtype, np.float64)
        store.validate(model)
