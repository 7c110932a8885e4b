"""Small shared helpers: errors, JSON scanning, ArXiv client, script runner."""
