import importlib.util
import sys

REQUIRED = ["numpy", "scipy", "pydantic", "pydantic_settings", "dotenv", "tqdm"]


def check_dependencies():
    print("🔍 Checking Python packages...")
    missing = [name for name in REQUIRED if importlib.util.find_spec(name) is None]
    if missing:
        print(f"❌ Error: missing packages: {', '.join(missing)}")
        print("Please run 'pip install -r requirements.txt' to continue.")
        sys.exit(1)
    print("✅ Dependencies are available.")


# Run startup checks before any other app imports
if __name__ == "__main__":
    check_dependencies()

    from app.main import main

    sys.exit(main())
