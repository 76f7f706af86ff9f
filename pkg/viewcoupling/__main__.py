from viewcoupling.main import main

raise SystemExit(main())
