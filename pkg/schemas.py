# masrc/schemas.py
from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator


# Pydantic model for one manifest line describing a video on disk
class ManifestEntry(BaseModel):
    video_id: str = Field(description="Unique identifier of the video.")
    num_shots: int = Field(ge=1, description="Number of shots N in the video.")
    dim_entity: int = Field(ge=1, description="Dimensionality d_E of the entity features.")
    dim_place: int = Field(ge=1, description="Dimensionality d_P of the place features.")
    entity_path: str = Field(description="Path of the entity feature file, relative to the manifest.")
    place_path: str = Field(description="Path of the place feature file, relative to the manifest.")
    labels: Optional[list[int]] = Field(None, description="Per-shot scene-ending labels (1 = shot ends a scene).")
    pseudo_labels: Optional[list[int]] = Field(None, description="Per-shot pseudo boundary labels for self-supervised training.")

    model_config = {
        "json_schema_extra": {
            "examples": [
                {
                    "video_id": "synth_0000",
                    "num_shots": 10,
                    "dim_entity": 8,
                    "dim_place": 8,
                    "entity_path": "synth_0000.entity.msrc",
                    "place_path": "synth_0000.place.msrc",
                    "labels": [0, 0, 0, 1, 0, 0, 1, 0, 0, 1],
                }
            ]
        }
    }


class SynthConfig(BaseModel):
    num_videos: int = Field(20, ge=1, description="Number of videos to generate.")
    num_val_videos: int = Field(0, ge=0, description="How many of the generated videos form the validation split.")
    scenes_per_video: int = Field(8, ge=1, description="Scenes in every video.")
    min_shots_per_scene: int = Field(4, ge=1)
    max_shots_per_scene: int = Field(10, ge=1)
    dim_entity: int = Field(16, ge=1)
    dim_place: int = Field(16, ge=1)
    noise: float = Field(0.1, ge=0.0, description="Standard deviation of the per-coordinate Gaussian noise.")
    entity_pool_size: int = Field(3, ge=1, description="Distinct entity centroids drawn per scene.")
    entity_recurrence: float = Field(0.6, ge=0.0, le=1.0,
                                     description="Probability that a shot re-shows an entity already seen in its scene.")
    pseudo_label_flip: float = Field(0.1, ge=0.0, le=1.0,
                                     description="Probability of flipping a label when deriving pseudo labels.")
    # Film-grammar structure; the defaults leave every shot on its scene's centroids.
    two_shot_rate: float = Field(0.0, ge=0.0, le=1.0,
                                 description="Probability that a shot shows two cast members at once.")
    wide_every: int = Field(0, ge=0, description="Scene offsets divisible by this are wide shots; 0 makes every "
                                                 "shot a wide shot.")
    detail_place_weight: float = Field(1.0, ge=0.0, le=1.0,
                                       description="Share of the place centroid in a detail shot's place vector.")
    place_carryover: float = Field(0.0, ge=0.0, le=1.0,
                                   description="Probability that a scene keeps the previous scene's place.")
    cast_carryover: float = Field(0.0, ge=0.0, le=1.0,
                                  description="Probability that a scene keeps the previous scene's cast.")

    @model_validator(mode="after")
    def _check_ranges(self) -> "SynthConfig":
        if self.min_shots_per_scene > self.max_shots_per_scene:
            raise ValueError("min_shots_per_scene must not exceed max_shots_per_scene")
        if self.num_val_videos >= self.num_videos:
            raise ValueError("num_val_videos must leave at least one training video")
        if self.place_carryover + self.cast_carryover > 1.0:
            raise ValueError("place_carryover + cast_carryover must not exceed 1")
        return self


GraphKind = Literal["ejg", "pcg"]


class ModalityConfig(BaseModel):
    modality: Literal["entity", "place", "both"] = "both"
    use_eld: bool = Field(True, description="Run a relation module on the entity branch.")
    use_psd: bool = Field(True, description="Run a relation module on the place branch.")
    entity_graph: GraphKind = Field("ejg", description="Relation module for the entity branch (long- or short-term).")
    place_graph: GraphKind = Field("pcg", description="Relation module for the place branch (short- or long-term).")
    detector: Literal["mcd", "mlp"] = "mcd"
    affiliation: Literal["both", "similarity", "proximity"] = Field(
        "both", description="Detail-to-wide affinity in the place continuity graph.")
    use_d2w: bool = Field(True, description="Run the detail -> wide pass of the place continuity graph.")
    use_w2d: bool = Field(True, description="Run the wide -> detail pass of the place continuity graph.")

    @model_validator(mode="after")
    def _check_stages(self) -> "ModalityConfig":
        if not (self.use_d2w or self.use_w2d):
            raise ValueError("At least one of use_d2w / use_w2d must stay on; use use_psd=false to drop the graph.")
        return self

    @property
    def pcg_stages(self) -> tuple[str, ...]:
        return tuple(s for s, on in (("d2w", self.use_d2w), ("w2d", self.use_w2d)) if on)

    @property
    def uses_entity(self) -> bool:
        return self.modality in ("entity", "both")

    @property
    def uses_place(self) -> bool:
        return self.modality in ("place", "both")


# Rows of the modality/temporal-scale and component ablations.
ABLATION_PRESETS: dict[str, ModalityConfig] = {
    "full": ModalityConfig(),
    "entity_short": ModalityConfig(modality="entity", entity_graph="pcg"),
    "entity_long": ModalityConfig(modality="entity"),
    "place_long": ModalityConfig(modality="place", place_graph="ejg"),
    "place_short": ModalityConfig(modality="place"),
    "entity_short_place_long": ModalityConfig(entity_graph="pcg", place_graph="ejg"),
    "mlp_only": ModalityConfig(use_eld=False, use_psd=False, detector="mlp"),
    "mcd_only": ModalityConfig(use_eld=False, use_psd=False),
    "eld_mcd": ModalityConfig(use_psd=False),
    "psd_mcd": ModalityConfig(use_eld=False),
    # Place continuity graph variants.
    "affiliation_similarity": ModalityConfig(affiliation="similarity"),
    "affiliation_proximity": ModalityConfig(affiliation="proximity"),
    "d2w_only": ModalityConfig(use_w2d=False),
    "w2d_only": ModalityConfig(use_d2w=False),
}


class TrainConfig(BaseModel):
    regime: Literal["supervised", "self_supervised", "transfer"] = "supervised"
    window: int = Field(14, ge=4, description="Window length T (even).")
    k: int = Field(4, ge=1, description="Neighbours kept per shot in the entity jumping graph.")
    batch_size: int = Field(64, ge=1)
    peak_lr: float = Field(1e-4, gt=0.0, description="Peak learning rate for supervised / self-supervised runs.")
    pretrain_lr: float = Field(1e-3, gt=0.0, description="Peak learning rate of the transfer pre-training phase.")
    fine_tune_lr: float = Field(1e-5, gt=0.0, description="Peak learning rate of the transfer fine-tuning phase.")
    epochs: int = Field(20, ge=1)
    pretrain_epochs: Optional[int] = Field(None, ge=1, description="Epochs of transfer pre-training (defaults to epochs).")
    warmup_epochs: int = Field(1, ge=1)
    patience: int = Field(5, ge=1, description="Epochs without validation AP improvement before stopping.")
    seed: int = 0
    hidden: int = Field(128, ge=1, description="Hidden width of the classifier MLP.")
    threshold: float = Field(0.5, gt=0.0, lt=1.0, description="Score threshold for F1 and mIoU.")
    miou_mode: Literal["symmetric", "gt"] = "symmetric"
    modality: ModalityConfig = Field(default_factory=ModalityConfig)
    show_progress: bool = True

    @model_validator(mode="after")
    def _check_window(self) -> "TrainConfig":
        if self.window % 2:
            raise ValueError(f"window must be even, got {self.window}")
        if not 1 <= self.k <= self.window - 1:
            raise ValueError(f"k must lie in [1, {self.window - 1}], got {self.k}")
        return self


class RunConfig(TrainConfig):
    train_manifest: Optional[str] = Field(None, description="Manifest of the training videos.")
    val_manifest: Optional[str] = Field(None, description="Manifest of the validation videos.")
    out_dir: str = Field("runs/masrc", description="Directory receiving checkpoint and metrics.")


class MetricsRecord(BaseModel):
    epoch: int
    split: str
    ap: float
    miou: float
    f1: float
    loss: Optional[float] = None
    phase: Optional[str] = None


if __name__ == '__main__':
    print("--- Pydantic Model Test ---")
    print(TrainConfig().model_dump_json(indent=2))
    for name, preset in ABLATION_PRESETS.items():
        print(f"  {name}: {preset.model_dump()}")
