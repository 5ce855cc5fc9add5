import pytest

from emkd import data as D

TINY_SPEC = D.DatasetSpec(image_size=32, num_cases=5, slices_min=2, slices_max=2, organ_radius_min=8,
                          organ_radius_max=10, tumor_radius_min=3, tumor_radius_max=5, seed=11)


@pytest.fixture(scope="session")
def tiny_dataset():
    return D.generate(TINY_SPEC)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory, tiny_dataset):
    path = tmp_path_factory.mktemp("tiny_data")
    D.write_dataset(tiny_dataset, path)
    return path
