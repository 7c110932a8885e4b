"""Design-State Graph model."""
