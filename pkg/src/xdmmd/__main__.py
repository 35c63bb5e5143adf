from xdmmd.cli import main

raise SystemExit(main())
