#!/usr/bin/env python3
"""
Database setup script for the Hypercloud run registry

This script creates the registry tables that training, evaluation and
benchmark runs are recorded into.
"""

import os
import sys

from hypercloud.common.config import DEFAULT_DATABASE_URL
from hypercloud.services.database import create_tables, get_engine, get_session_factory
from hypercloud.services.run_service import get_registry_statistics


def main():
    """Main setup function."""
    print("Hypercloud - Run Registry Setup")
    print("=" * 40)

    database_url = os.getenv("DATABASE_URL")
    if not database_url:
        database_url = DEFAULT_DATABASE_URL
        os.environ["DATABASE_URL"] = database_url
        print(f"\n🔧 Setting DATABASE_URL: {database_url}")
    else:
        print(f"\n✅ Using existing DATABASE_URL: {database_url}")

    try:
        print("\n📦 Setting up database...")
        engine = get_engine(database_url)
        print(f"🔗 Database engine initialized: {str(engine.url).split('@')[-1]}")

        print("\n🏗️  Creating database tables...")
        if create_tables(engine):
            print("✅ Database tables created successfully!")
        else:
            raise Exception("Failed to create database tables")

        db = get_session_factory(engine)()
        try:
            stats = get_registry_statistics(db)
            print(f"📊 Registry holds {stats['total_runs']} training runs, "
                  f"{stats['total_evaluations']} evaluations and {stats['total_benchmarks']} benchmarks")
        finally:
            db.close()
            engine.dispose()

        print("\n🎉 Database setup complete!")
        print("\nTo record a run:")
        print(f"   python -m hypercloud train <tiles> --out <model_dir> --registry {database_url}")

    except Exception as e:
        print(f"\n❌ Database setup failed: {e}")
        print("\nPlease ensure:")
        print("1. DATABASE_URL is a valid SQLAlchemy URL")
        print("2. The target directory (SQLite) or server is writable")
        sys.exit(1)


if __name__ == "__main__":
    main()
