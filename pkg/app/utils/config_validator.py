"""
Run Configuration Validator
Cross-section checks a single pydantic section cannot see on its own
"""
import logging
from typing import Any, Dict, List, Optional

from app.config import RunConfig, Settings, finetune_window_length, get_settings, window_length_for
from app.exceptions import ConfigurationError
from app.models import DatasetSource, EncoderPreset
from app.services.encoder import encoder_spec_from_config

logger = logging.getLogger(__name__)


class ConfigValidator:
    """Validates a RunConfig before a command starts work"""

    @staticmethod
    def validate_run_config(config: RunConfig, settings: Optional[Settings] = None) -> Dict[str, Any]:
        """
        Check the view, encoder, pretrain, finetune and dataset sections against each other.
        Returns validation status and any issues found.
        """
        issues: List[str] = []
        warnings: List[str] = []

        try:
            settings = settings or get_settings()
            spec = encoder_spec_from_config(config.encoder)
        except Exception as e:
            return {
                "valid": False,
                "critical_issues": [f"Failed to resolve configuration: {str(e)}"],
                "warnings": [],
                "recommendations": ["Check the config file and VDIM_ environment variables"],
            }

        # Views must match the encoder's input contract
        _, in_t, in_x, in_y = spec.input_shape
        if config.view.final_length != in_t:
            issues.append(
                f"view.final_length={config.view.final_length} but the {spec.preset} encoder expects {in_t} frames"
            )
        if config.view.crop_size != in_x or in_x != in_y:
            issues.append(
                f"view.crop_size={config.view.crop_size} but the {spec.preset} encoder expects {in_x}x{in_y} frames"
            )

        # Contrastive pairs need tapped layers
        taps = set(spec.tap_layers)
        paired = set(config.pretrain.layer_pairs.antecedent) | set(config.pretrain.layer_pairs.consequent)
        missing = sorted(paired - taps)
        if missing:
            issues.append(f"layer pairs use layers {missing} that are not encoder taps {sorted(taps)}")
        if 8 not in taps:
            warnings.append("encoder.tap_layers does not include 8 - fine-tuning needs the global layer")

        # Dataset
        if config.dataset.source is DatasetSource.FRAME_DIR:
            if config.dataset.root is None:
                issues.append("dataset.root is required for frame_dir datasets")
            if config.dataset.manifest is None:
                warnings.append("dataset.manifest not set - defaulting to <root>/manifest.tsv")
        else:
            synthetic = config.dataset.synthetic
            if synthetic.class_count == 0 or synthetic.clips_per_class == 0:
                issues.append("synthetic dataset needs at least one class and one clip per class")
            pretrain_window = window_length_for(config.view, config.pretrain.temporal_difference)
            if synthetic.clip_length < pretrain_window:
                warnings.append(
                    f"synthetic clip_length={synthetic.clip_length} is shorter than the {pretrain_window}-frame "
                    f"pretraining window - clips will be padded with their last frame"
                )
            finetune_window = finetune_window_length(config.view, config.finetune)
            if synthetic.clip_length < finetune_window:
                warnings.append(
                    f"synthetic clip_length={synthetic.clip_length} is shorter than the {finetune_window}-frame "
                    f"fine-tuning window (K={config.finetune.views})"
                )

        # Process settings
        if settings.deterministic and settings.num_workers > 0:
            warnings.append("VDIM_DETERMINISTIC with data-loader workers - set VDIM_NUM_WORKERS=0 for exact traces")
        if config.encoder.preset is EncoderPreset.FULL and settings.resolve_device().type == "cpu":
            warnings.append("full encoder on CPU - expect slow steps; the tiny preset is sized for desk runs")

        is_valid = len(issues) == 0

        recommendations = []
        if issues:
            recommendations.append("Fix all critical issues before starting the run")
        if warnings:
            recommendations.append("Review warnings before comparing results across runs")

        return {
            "valid": is_valid,
            "critical_issues": issues,
            "warnings": warnings,
            "recommendations": recommendations,
        }


def validate_config_on_startup(config: RunConfig, settings: Optional[Settings] = None) -> bool:
    """Validate a run configuration before a command starts"""
    validation_result = ConfigValidator.validate_run_config(config, settings)

    if validation_result["warnings"]:
        logger.warning("⚠️ CONFIGURATION WARNINGS:")
        for warning in validation_result["warnings"]:
            logger.warning(f"   • {warning}")

    if not validation_result["valid"]:
        logger.error("❌ CRITICAL CONFIGURATION ISSUES FOUND:")
        for issue in validation_result["critical_issues"]:
            logger.error(f"   • {issue}")
        raise ConfigurationError(
            "configuration validation failed: " + "; ".join(validation_result["critical_issues"])
        )

    logger.info("✅ Configuration validation passed")
    return True
