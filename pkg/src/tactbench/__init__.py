"""Simulated tactile grasping workbench: data generation, balancing and multi-modal grasp-stability learning."""

__version__ = "0.1.0"
