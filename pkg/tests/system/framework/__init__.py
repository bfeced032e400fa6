"""System test framework for exemplar-synth."""
