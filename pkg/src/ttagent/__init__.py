"""Desk-scale table-tennis agent stack: ball physics, skills, descriptors, a high-level controller and match simulation."""

__version__ = "0.1.0"

from .ballistics import BallState, ContactParams, FlightParams, PaddleState, TableGeometry, simulate_trajectory
from .config import load_config
from .dataset import Dataset, fit_initial_state, reflect_y, sample_initial_state
from .descriptors import DescriptorTable, build_all, query, update_with_real
from .hlc import HighLevelController, PreferenceState, StyleModel, hlc_act, update_preferences
from .matchsim import MatchState, OpponentProfile, RobotStack, run_match, score_point
from .optimizer import EsConfig, run_es
from .skills import SkillEnv, SkillSpec, build_skills, default_roster, execute_shot

__all__ = [
    "BallState", "ContactParams", "DescriptorTable", "Dataset", "EsConfig", "FlightParams", "HighLevelController",
    "MatchState", "OpponentProfile", "PaddleState", "PreferenceState", "RobotStack", "SkillEnv", "SkillSpec",
    "StyleModel", "TableGeometry", "build_all", "build_skills", "default_roster", "execute_shot", "fit_initial_state",
    "hlc_act", "load_config", "query", "reflect_y", "run_es", "run_match", "sample_initial_state", "score_point",
    "simulate_trajectory", "update_preferences", "update_with_real",
]
