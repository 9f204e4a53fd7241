"""inferkit: desk-scale CPU transformer inference engine."""
