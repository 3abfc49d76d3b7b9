from pathlib import Path
from typing import Optional

from pydantic import Field
from pydantic_settings import BaseSettings
from dotenv import load_dotenv

load_dotenv()

class Config(BaseSettings):
    # Runtime
    ENVIRONMENT: str = Field(default="dev", description="Run environment (dev/ci/prod); prod and ci log JSON")
    LOG_LEVEL: str = Field(default="INFO", description="Minimum structlog level")
    MFGLAB_THREADS: int = Field(default=1, ge=1, description="Worker cap for independent solves")
    OUTPUT_ROOT: str = Field(
        default=str(Path.cwd() / "mfglab-runs"),
        description="Default parent directory for run artifacts"
    )
    
    # Ergodic HJB (policy iteration)
    HJB_TOL: float = Field(default=1e-9, description="Max-norm residual tolerance, relative to 1 + osc(f)")
    HJB_MAX_ITERS: int = Field(default=100, description="Maximum policy iterations")
    HJB_EARLY_DAMPING: float = Field(default=0.5, description="Relaxation of the first policy updates")
    HJB_DAMPED_STEPS: int = Field(default=2, description="Number of relaxed policy updates")
    
    # Stationary Fokker-Planck (shifted inverse power iteration)
    FP_SHIFT: float = Field(default=1e-10, description="Diagonal shift relative to the largest generator rate")
    FP_MAX_ITERS: int = Field(default=50, description="Maximum inverse power iterations")
    FP_TOL: float = Field(default=1e-14, description="L1 change tolerance relative to the mass")
    
    # MFG fixed point
    MFG_DAMPING: float = Field(default=0.5, description="Picard relaxation weight")
    MFG_TOL: float = Field(default=1e-8, description="L1 density change tolerance relative to the mass")
    MFG_MAX_OUTER: int = Field(default=200, description="Maximum outer Picard iterations")
    MFG_OSCILLATION_WINDOW: int = Field(default=5, description="Consecutive energy increases that abort a solve")
    MFG_ADAPTIVE_AFTER: int = Field(default=20, ge=0, description="Outer iterations with fixed damping before adaptive relaxation")
    MFG_MIN_DAMPING: float = Field(default=0.05, gt=0.0, description="Lower clip of the adaptive relaxation weight")
    MFG_MAX_RELAXATION: float = Field(default=4.0, ge=1.0, description="Upper clip of the adaptive relaxation weight")
    DUALITY_TOL: float = Field(default=1e-6, description="Relative tolerance of the lambda*M identity")
    
    # Choquard gradient flow
    CHOQUARD_TOL: float = Field(default=1e-10, description="Eigen-residual tolerance, relative to 1 + |mu|")
    CHOQUARD_MAX_ITERS: int = Field(default=2000, description="Maximum gradient flow steps")
    CHOQUARD_MIN_STEP: float = Field(default=1e-12, description="Smallest admissible flow step")
    
    # Truncation
    BOUNDARY_DENSITY_WARN: float = Field(
        default=1e-10,
        description="Boundary-to-peak density ratio above which the box is reported as too small"
    )
    
    model_config = {
        "env_file": ".env",
        "env_file_encoding": "utf-8",
        "case_sensitive": True,
        "extra": "ignore"
    }
    
    def ensure_directories(self) -> None:
        Path(self.OUTPUT_ROOT).mkdir(parents=True, exist_ok=True)
    
    def is_production(self) -> bool:
        return self.ENVIRONMENT.lower() in ("prod", "production", "ci")
    
    def is_development(self) -> bool:
        return self.ENVIRONMENT.lower() in ("dev", "development", "local")

_config_instance: Optional[Config] = None

def get_config() -> Config:
    global _config_instance
    if _config_instance is None:
        _config_instance = Config()
    return _config_instance

def reset_config() -> None:
    global _config_instance
    _config_instance = None
