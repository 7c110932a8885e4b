"""LLM-side of dsgforge: gateway, agents, prompts, tools and the workflow state machines."""
