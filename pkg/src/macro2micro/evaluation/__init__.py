from .metrics import (MetricReport, aggregate, image_metrics, mae, masked_metrics, mse, psnr,
                      ssim, ssim_map, write_metric_table)
from .analysis import PcaEmbedding, distance_profile, linear_probe, pca_embed

__all__ = [
    "MetricReport", "aggregate", "image_metrics", "mae", "masked_metrics", "mse", "psnr",
    "ssim", "ssim_map", "write_metric_table", "PcaEmbedding", "distance_profile",
    "linear_probe", "pca_embed",
]
