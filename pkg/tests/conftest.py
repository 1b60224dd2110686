import numpy as np
import pytest

import kbvqa


@pytest.fixture(scope="module")
def server():
    server = kbvqa.Server(('localhost', 0))
    yield server
    server.server_close()


@pytest.fixture(scope='function')
def fooprovider(server):
    class FooProvider(kbvqa.ProviderBase):
        def foo(self):
            return "foo"
    return FooProvider(server)


@pytest.fixture(scope='function')
def barprovider(server):
    class BarProvider(kbvqa.ProviderBase):
        def bar(self):
            return "bar"
    return BarProvider(server)


@pytest.fixture(autouse=True)
def default_dtype():
    """Every test starts in double precision and leaves it that way."""
    kbvqa.set_default_dtype("float64")
    yield
    kbvqa.set_default_dtype("float64")


@pytest.fixture(scope='session')
def gradcheck():
    """Compare the gradients of ``backward`` with central differences.

    ``fn`` rebuilds a scalar loss from the given leaf tensors on every call.
    """
    def check(fn, tensors, eps=1e-6, atol=1e-6, rtol=1e-4):
        for t in tensors:
            t.grad = None
        kbvqa.backward(fn())
        for t in tensors:
            analytic = np.zeros(t.shape) if t.grad is None else t.grad
            numeric = np.zeros(t.shape)
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + eps
                plus = fn().item()
                flat[i] = old - eps
                minus = fn().item()
                flat[i] = old
                numeric.reshape(-1)[i] = (plus - minus) / (2 * eps)
            np.testing.assert_allclose(analytic, numeric, atol=atol, rtol=rtol, err_msg=t.name or "tensor")
    return check


@pytest.fixture(scope='function')
def small_kb():
    return kbvqa.build_index([kbvqa.FactTriplet("cat", "RelatedTo", "tiger"),
                              kbvqa.FactTriplet("cat", "IsA", "animal"),
                              kbvqa.FactTriplet("tiger", "HasProperty", "striped"),
                              kbvqa.FactTriplet("dog", "IsA", "animal"),
                              kbvqa.FactTriplet("bone", "UsedFor", "dog")])


@pytest.fixture(scope='function')
def tiny_config(tmp_path):
    """A configuration small enough to train in seconds on generated data."""
    return kbvqa.RunConfig(word_dim=8, detector_hidden=8, memory_dim=8, feature_dim=6, num_objects=4,
                           max_question_len=12, topk_subjects=3, topk_objects=3, topk_relations=2,
                           memory_size=8, detector_batch=8, detector_epochs=1, memnet_batch=8, memnet_epochs=1,
                           detector_lr=1e-2, memnet_lr=1e-2,
                           data_dir=str(tmp_path / "data"), work_dir=str(tmp_path / "work"),
                           eval_splits=["val", "test"])


@pytest.fixture(scope='function')
def tiny_spec():
    return kbvqa.GeneratorSpec(entities=12, relations=3, facts_per_entity=2, train_size=16, val_size=6,
                               test_size=6, num_objects=4, feature_dim=6, distractors=1, multiword_every=5)


@pytest.fixture(scope='function')
def tiny_data(tiny_config, tiny_spec):
    """Generated data in the data directory of ``tiny_config``."""
    kb, splits = kbvqa.generate_synthetic(tiny_spec)
    vocabularies = kbvqa.write_dataset(tiny_config.data_dir, kb, splits)
    return kb, splits, vocabularies


@pytest.fixture(scope='function')
def trained(tiny_config, tiny_data):
    """Checkpoints of a complete tiny run."""
    return kbvqa.train(tiny_config, stage="all")


@pytest.fixture(scope='session')
def random_kb():
    """Build a random knowledge base over ``e0 ... e<entities-1>`` and ``r0 ... r<relations-1>``."""
    def build(rng, entities=10, relations=3, facts=20):
        triplets = [kbvqa.FactTriplet("e%s" % rng.randint(entities), "r%s" % rng.randint(relations),
                                      "e%s" % rng.randint(entities)) for _ in range(facts)]
        return kbvqa.build_index(triplets)
    return build
