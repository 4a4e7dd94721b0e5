from pnpfem.cli import main

raise SystemExit(main())
