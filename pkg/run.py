#!/usr/bin/env python3
"""
Entry point for running trafficlm from a source checkout.
"""

if __name__ == "__main__":
    import os
    import sys
    sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "src"))
    from trafficlm.main import main
    main()
