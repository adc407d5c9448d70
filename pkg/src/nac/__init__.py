"""Neural architecture construction over EnvelopeNets."""
