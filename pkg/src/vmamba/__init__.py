"""NumPy reference implementation of a 2D selective-scan vision backbone."""
from .tensor import TensorBundle, tensor_create, vmtb_read, vmtb_write, load_bundle, save_bundle
from .ssm import (SelScanInputs, ScanOutput, selective_scan_seq, selective_scan_parallel,
                  selective_scan_backward)
from .paths import PatternKind, ScanPath, generate_paths, gather, scatter_add, cascade_scan
from .ss2d import InitKind, InitScheme, Ss2dConfig, init_params, ss2d_forward, vss_block_forward
from .model import ModelConfig, build_model, model_forward, count_params, count_flops

__version__ = "0.1.0"
