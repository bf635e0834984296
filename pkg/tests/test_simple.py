from protoquant import *
import math
import pytest
import torch


# Useful fixtures
@pytest.fixture
def orthonormal_3():
    return PrototypeSet(torch.eye(3, dtype=torch.float64), 'codebook')


@pytest.fixture
def orthonormal_2():
    return PrototypeSet(torch.eye(2, dtype=torch.float64), 'codebook')


@pytest.fixture
def random_features():
    gen = make_generator(0, 'test_features')
    return l2_normalize_rows(torch.randn((8, 6), generator=gen, dtype=torch.float64))


@pytest.fixture
def random_prototypes():
    return codebook_prototypes(4, 6, seed=0).detach()


@pytest.fixture
def small_spec():
    return DatasetSpec(num_classes=4, dim=16, n_per_class=20, intra_spread=0.05, inter_separation=1.0, seed=3)


@pytest.fixture
def small_data(small_spec):
    return generate_dataset(small_spec)


@pytest.fixture
def small_split(small_data):
    return few_shot_split(small_data, 4, seed=0)


@pytest.fixture
def tiny_config():
    return TrainConfig(epochs=3, min_steps=0, batch_size=8, warmup_epochs=1, m=2, seed=0)


@pytest.fixture
def trained_state(tiny_config, small_split):
    return train(tiny_config, small_split[0])


@pytest.fixture
def embedding_file(tmp_path, small_data):
    path = str(tmp_path / 'd.pcqe')
    write_embeddings(path, small_data)
    return path
