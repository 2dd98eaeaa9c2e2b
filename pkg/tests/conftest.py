import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_sc():
    """A 4-class encoder + classifier trained briefly on wide-margin synthetic images."""
    from types import SimpleNamespace

    from rome import channel as ch
    from rome import data as ds
    from rome import models as mdl

    rng = np.random.default_rng(0)
    d = ds.synth_dataset(4, 64, 8.0, 1200, rng)
    train, test = d.split(800)
    cfg = mdl.ModelConfig(classes=4)
    channel = ch.ChannelModel("awgn", 20.0)
    enc = mdl.build_encoder(cfg, rng)
    cls = mdl.build_classifier(cfg, enc.feature_shape, rng)
    mdl.train_end_to_end(enc, cls, train.images, train.labels, channel, rng, epochs=4,
                         batch_size=64, lr=3e-3)
    enc.graph.freeze()
    cls.graph.freeze()
    return SimpleNamespace(config=cfg, encoder=enc, classifier=cls, train=train, test=test,
                           channel=channel, x_train=mdl.encode(enc, train.images),
                           x_test=mdl.encode(enc, test.images))
