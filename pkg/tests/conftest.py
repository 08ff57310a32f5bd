import pytest

from hybridnas import space as sp


@pytest.fixture
def default_config():
    return sp.default_space()


@pytest.fixture
def toy_config():
    """576 canonical genomes, 456 valid under the 100k budget."""
    return sp.SearchSpaceConfig(
        cnn_depth=(1,),
        vit_depth=(1,),
        cnn_blocks=sp.CNNBlockDomains(
            kind=("residual",),
            kernel_size=(3,),
            stride=(1, 2),
            out_channels=(8, 16, 24, 32, 48, 64, 96, 128),
            groups=(1,),
        ),
        pooling=sp.PoolingDomains(kind=("max",), kernel_size=(2,), stride=(2,)),
        vit_blocks=sp.ViTBlockDomains(
            kind=("vit",),
            heads=(1, 2, 4),
            qkv_dim=(16, 32, 64),
            use_ff=(True, False),
            ff_dim=(64,),
            attn_kind=("softmax", "linear"),
        ),
    )


@pytest.fixture
def singleton_config():
    """Exactly one architecture: every domain is a singleton."""
    return sp.SearchSpaceConfig(
        cnn_depth=(1,),
        vit_depth=(1,),
        cnn_blocks=sp.CNNBlockDomains(
            kind=("residual",), kernel_size=(3,), stride=(1,), out_channels=(16,), groups=(1,)
        ),
        pooling=sp.PoolingDomains(kind=("max",), kernel_size=(2,), stride=(2,)),
        vit_blocks=sp.ViTBlockDomains(
            kind=("vit",),
            heads=(2,),
            qkv_dim=(16,),
            use_ff=(True,),
            ff_dim=(32,),
            attn_kind=("linear",),
        ),
    )
