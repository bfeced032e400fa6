"""System tests for exemplar-synth commands."""
