from dicode.cli import main

raise SystemExit(main())
