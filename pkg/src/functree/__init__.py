"""Function-tree overlay for decentralized container provisioning, with a
discrete-event network simulator to compare it against registry-centric
baselines."""
from .blockstore import BlockFile, Manifest, convert, verify
from .ftree import FunctionTree, Rotation, VmId, ft_new
from .manager import REGISTRY, FtManager, ManagerConfig
from .provision import Phase, Platform, PlatformConfig, ProvisionSession, SimImage
from .simnet import SimWorld

__version__ = "0.1.0"

__all__ = [
    "BlockFile", "Manifest", "convert", "verify",
    "FunctionTree", "Rotation", "VmId", "ft_new",
    "REGISTRY", "FtManager", "ManagerConfig",
    "Phase", "Platform", "PlatformConfig", "ProvisionSession", "SimImage",
    "SimWorld",
]
