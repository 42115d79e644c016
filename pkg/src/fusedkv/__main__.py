from fusedkv.cli import main

raise SystemExit(main())
