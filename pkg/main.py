"""Launcher for the T-LoRA toy diffusion tool."""

from tlora_tool.cli import main

if __name__ == "__main__":  # pragma: no cover - manual launch
    raise SystemExit(main())
